//! Command-line front end. Every pipeline stage is a subcommand, and a
//! few convenience commands run whole experiments, aggregate saved
//! results, or render plots. Exit codes identify the failure class so
//! scripts can branch on them.

use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use fedbip::client::client_update;
use fedbip::config::RunConfig;
use fedbip::container::{read_upload, write_upload};
use fedbip::error::{Error, Result};
use fedbip::ldm::{LdmParams, SlotValue};
use fedbip::pipeline::{
    self, ExperimentResult, build_environment, pretrain_backbone, run_central, run_fedavg,
    run_fedbip,
};
use fedbip::plot;
use fedbip::privacy_eval::gamma_sweep;
use fedbip::server::{evaluate_by_domain, server_update};
use fedbip::types::Image;

#[derive(Parser)]
#[command(
    name = "fedbip",
    version,
    about = "One-shot federated learning with bi-level personalization of a latent diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Flat JSON config with dotted keys; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; falls back to $FEDBIP_OUT, then ./out.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for client updates; 0 uses the default pool.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Named experiment preset (table3-row1..7, fig4, fig5).
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrains the diffusion backbone and saves the checkpoint.
    Pretrain,
    /// Writes the client partition manifest.
    Partition,
    /// Runs client updates against a saved backbone and writes uploads.
    ClientUpdate {
        /// Directory holding a saved backbone checkpoint.
        #[arg(long)]
        backbone: PathBuf,
        /// Single client id; all clients when omitted.
        #[arg(long)]
        client: Option<u64>,
    },
    /// Synthesizes from saved uploads and trains the server classifier.
    ServerUpdate {
        #[arg(long)]
        backbone: PathBuf,
        /// Directory containing one subdirectory per client upload.
        #[arg(long)]
        uploads: PathBuf,
    },
    /// Runs the full one-shot protocol end to end.
    Run,
    /// Multi-round gradient-averaging baseline.
    Fedavg,
    /// Centralized pooled-data baseline.
    Central,
    /// Privacy battery: membership gap, latent Gaussianity, retrieval,
    /// and an interpolation-strength sweep strip.
    EvalPrivacy,
    /// Aggregates saved result files into a comparison table.
    Compare {
        /// Result JSON files produced by run/fedavg/central.
        files: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Line chart of accuracy against a swept config key.
    Plot {
        files: Vec<PathBuf>,
        /// Config key to read the x coordinate from.
        #[arg(long, default_value = "partition.clients_per_domain")]
        x_key: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// One exit code per error class, so callers can tell a bad flag from a
/// corrupt upload without parsing stderr.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::InvalidArgument(_) => 3,
        Error::ShapeMismatch { .. } => 4,
        Error::CorruptUpload(_) => 5,
        Error::OneShotViolation(_) => 6,
        Error::Divergence(_) => 7,
        Error::Io(_) => 8,
        Error::Json(_) => 9,
        Error::Image(_) => 10,
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out_dir
        .clone()
        .or_else(|| std::env::var_os("FEDBIP_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Resolves --preset / --config / --seed into labeled configs. A preset
/// yields one config per experiment in the sweep; a file yields one.
fn load_configs(cli: &Cli) -> Result<Vec<(String, RunConfig)>> {
    let mut configs = match (&cli.preset, &cli.config) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidArgument(
                "--preset and --config are mutually exclusive".into(),
            ));
        }
        (Some(name), None) => RunConfig::preset(name)?,
        (None, Some(path)) => vec![("run".to_string(), RunConfig::from_json_file(path)?)],
        (None, None) => vec![("run".to_string(), RunConfig::default())],
    };
    if let Some(seed) = cli.seed {
        for (_, c) in &mut configs {
            c.seed = seed;
        }
    }
    for (_, c) in &configs {
        c.validate()?;
    }
    Ok(configs)
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    Ok(std::fs::write(path, text)?)
}

fn write_loss_csv(path: &Path, stage: &str, losses: &[f64]) -> Result<()> {
    let rows: Vec<String> =
        losses.iter().enumerate().map(|(i, l)| format!("{stage},{i},{l}")).collect();
    write_csv(path, "stage,epoch,loss", &rows)
}

fn save_result(out: &Path, result: &ExperimentResult) -> Result<PathBuf> {
    let path = out.join(format!("result-{}-seed{}.json", result.label, result.seed));
    std::fs::write(&path, result.to_json()?)?;
    Ok(path)
}

fn load_results(files: &[PathBuf]) -> Result<Vec<ExperimentResult>> {
    files.iter().map(|f| ExperimentResult::from_json(&std::fs::read_to_string(f)?)).collect()
}

fn cmd_pretrain(cli: &Cli, out: &Path) -> Result<()> {
    for (label, cfg) in load_configs(cli)? {
        let dir = out.join(&label);
        std::fs::create_dir_all(&dir)?;
        let env = build_environment(&cfg)?;
        let (model, report) = pretrain_backbone(&env, &cfg)?;
        model.save(&dir.join("backbone"))?;
        write_loss_csv(&dir.join("pretrain-ae.csv"), "autoencoder", &report.ae_losses)?;
        write_loss_csv(&dir.join("pretrain-denoise.csv"), "denoiser", &report.denoise_losses)?;
        println!(
            "{label}: pretrained backbone saved to {} (ae loss {:.5} -> {:.5}, denoise {:.5} -> {:.5})",
            dir.join("backbone").display(),
            report.ae_losses.first().unwrap_or(&f64::NAN),
            report.ae_losses.last().unwrap_or(&f64::NAN),
            report.denoise_losses.first().unwrap_or(&f64::NAN),
            report.denoise_losses.last().unwrap_or(&f64::NAN),
        );
    }
    Ok(())
}

fn cmd_partition(cli: &Cli, out: &Path) -> Result<()> {
    for (label, cfg) in load_configs(cli)? {
        let dir = out.join(&label);
        std::fs::create_dir_all(&dir)?;
        let env = build_environment(&cfg)?;
        let path = dir.join("partition.json");
        std::fs::write(&path, env.partition.manifest_json()?)?;
        println!("{label}: {} clients -> {}", env.partition.clients.len(), path.display());
    }
    Ok(())
}

fn cmd_client_update(cli: &Cli, out: &Path, backbone: &Path, client: Option<u64>) -> Result<()> {
    for (label, cfg) in load_configs(cli)? {
        let model = LdmParams::load(backbone)?;
        let env = build_environment(&cfg)?;
        let uploads_dir = out.join(&label).join("uploads");
        let mut wrote = 0usize;
        for c in &env.partition.clients {
            if client.is_some_and(|id| id != c.client_id) {
                continue;
            }
            let (upload, report) = client_update(&model, c, &cfg)?;
            let dir = uploads_dir.join(format!("client-{}", c.client_id));
            std::fs::create_dir_all(&dir)?;
            write_upload(&upload, &dir)?;
            write_loss_csv(&dir.join("concept-loss.csv"), "concept", &report.loss_trace)?;
            wrote += 1;
        }
        if wrote == 0 {
            return Err(Error::InvalidArgument(format!(
                "client {} not present in the partition",
                client.expect("all-clients mode always writes")
            )));
        }
        println!("{label}: wrote {wrote} upload(s) to {}", uploads_dir.display());
    }
    Ok(())
}

fn cmd_server_update(cli: &Cli, out: &Path, backbone: &Path, uploads_dir: &Path) -> Result<()> {
    for (label, cfg) in load_configs(cli)? {
        let model = LdmParams::load(backbone)?;
        let mut entries: Vec<PathBuf> = std::fs::read_dir(uploads_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        let uploads =
            entries.iter().map(|p| read_upload(p)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = uploads.iter().collect();
        let outcome = server_update(&model, &refs, &cfg)?;
        let env = build_environment(&cfg)?;
        let accuracy = evaluate_by_domain(&outcome.classifier, &env.test);
        let dir = out.join(&label);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(
            dir.join("server.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "uploads": uploads.len(),
                "synthetic_count": outcome.synthetic.len(),
                "accuracy": accuracy,
            }))?,
        )?;
        write_loss_csv(&dir.join("classifier-loss.csv"), "classifier", &outcome.train_trace)?;
        let grid: Vec<Image> =
            outcome.synthetic.iter().take(16).map(|s| s.image.clone()).collect();
        plot::image_grid_png(&dir.join("synthetic-grid.png"), &grid, 4)?;
        println!(
            "{label}: {} synthetic images, macro accuracy {:.4}",
            outcome.synthetic.len(),
            accuracy.macro_avg
        );
    }
    Ok(())
}

fn cmd_run(cli: &Cli, out: &Path) -> Result<()> {
    let mut results = Vec::new();
    for (label, cfg) in load_configs(cli)? {
        let result = if label == "fedavg" {
            run_fedavg(&cfg, &label)?.0
        } else {
            let run = run_fedbip(&cfg, &label, cli.workers, None)?;
            let dir = out.join(&label);
            std::fs::create_dir_all(&dir)?;
            let grid: Vec<Image> =
                run.synthetic.iter().take(16).map(|s| s.image.clone()).collect();
            plot::image_grid_png(&dir.join("synthetic-grid.png"), &grid, 4)?;
            let env = build_environment(&cfg)?;
            let real: Vec<Image> =
                env.test.examples.iter().take(64).map(|e| e.image.clone()).collect();
            let synth: Vec<Image> =
                run.synthetic.iter().take(64).map(|s| s.image.clone()).collect();
            pipeline::feature_scatter(
                &run.classifier,
                &[
                    ("real".to_string(), real, [60, 120, 216]),
                    ("synthetic".to_string(), synth, [216, 90, 60]),
                ],
                &dir.join("feature-scatter.png"),
            )?;
            run.result
        };
        let path = save_result(out, &result)?;
        println!(
            "{label}: macro accuracy {:.4}, mia gap {:+.4} -> {}",
            result.accuracy.macro_avg,
            result.mia.loss_gap,
            path.display()
        );
        results.push(result);
    }
    if results.len() > 1 {
        let rows = pipeline::compare(&results)?;
        print!("{}", pipeline::render_compare(&rows));
    }
    Ok(())
}

fn cmd_baseline(cli: &Cli, out: &Path, method: &str) -> Result<()> {
    for (label, cfg) in load_configs(cli)? {
        let label = if label == "run" { method.to_string() } else { label };
        let (result, _) = match method {
            "fedavg" => run_fedavg(&cfg, &label)?,
            _ => run_central(&cfg, &label)?,
        };
        let path = save_result(out, &result)?;
        println!(
            "{label}: macro accuracy {:.4} -> {}",
            result.accuracy.macro_avg,
            path.display()
        );
    }
    Ok(())
}

fn cmd_eval_privacy(cli: &Cli, out: &Path) -> Result<()> {
    for (label, cfg) in load_configs(cli)? {
        let run = run_fedbip(&cfg, &label, cli.workers, None)?;
        let dir = out.join(&label);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(
            dir.join("privacy.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "mia": run.result.mia,
                "gaussianity": run.result.gaussianity,
                "retrieval_mean_top1": run.result.retrieval_mean_top1,
                "upload_bytes": run.result.upload_bytes,
            }))?,
        )?;
        // Interpolation-strength strip: the same pair of source images
        // mixed at increasing gamma, diffused and denoised.
        let env = build_environment(&cfg)?;
        let cell = env.train.cell(0, 0);
        if cell.len() >= 2 {
            let cond = run.model.condition(
                &SlotValue::Vocab(run.model.vocab.domain_token(0)?),
                &SlotValue::Vocab(run.model.vocab.class_token(0)?),
            )?;
            let gammas = [0.0, 0.25, 0.5, 0.75, 1.0];
            let images = gamma_sweep(
                &run.model,
                &cell[0].image,
                &cell[1].image,
                &cond,
                &gammas,
                cfg.seed,
                cfg.sample_steps,
            )?;
            plot::image_grid_png(&dir.join("gamma-sweep.png"), &images, gammas.len())?;
        }
        let g = run.result.gaussianity.as_ref().expect("full runs report gaussianity");
        println!(
            "{label}: mia gap {:+.4}, ks z(0) {:.4} -> z(T) {:.4}, retrieval top1 {:.4}",
            run.result.mia.loss_gap,
            g.ks_z0,
            g.ks_zt,
            run.result.retrieval_mean_top1.unwrap_or(f64::NAN),
        );
    }
    Ok(())
}

fn cmd_compare(files: &[PathBuf], csv: Option<&Path>) -> Result<()> {
    let results = load_results(files)?;
    let rows = pipeline::compare(&results)?;
    print!("{}", pipeline::render_compare(&rows));
    if let Some(path) = csv {
        let lines: Vec<String> = rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{}",
                    r.label, r.n, r.mean_accuracy, r.std_accuracy, r.mean_loss_gap
                )
            })
            .collect();
        write_csv(path, "label,n,mean_accuracy,std_accuracy,mean_loss_gap", &lines)?;
    }
    Ok(())
}

fn cmd_plot(out: &Path, files: &[PathBuf], x_key: &str, dest: Option<&Path>) -> Result<()> {
    let results = load_results(files)?;
    if results.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    // One series per method, points keyed by the swept config value.
    let mut by_method: BTreeMap<String, Vec<[f64; 2]>> = BTreeMap::new();
    for r in &results {
        let x = r
            .config
            .get(x_key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| {
                Error::InvalidArgument(format!("config key {x_key} is not numeric in {}", r.label))
            })?;
        by_method.entry(r.method.clone()).or_default().push([x, r.accuracy.macro_avg]);
    }
    const PALETTE: [[u8; 3]; 4] = [[60, 120, 216], [216, 90, 60], [60, 170, 90], [150, 90, 200]];
    let series: Vec<plot::Series> = by_method
        .into_iter()
        .enumerate()
        .map(|(i, (label, mut points))| {
            points.sort_by(|a, b| a[0].total_cmp(&b[0]));
            plot::Series { label, points, color: PALETTE[i % PALETTE.len()] }
        })
        .collect();
    let path = dest.map(Path::to_path_buf).unwrap_or_else(|| out.join("accuracy.png"));
    plot::line_png(&path, &series)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let out = out_dir(cli);
    std::fs::create_dir_all(&out)?;
    match &cli.cmd {
        Cmd::Pretrain => cmd_pretrain(cli, &out),
        Cmd::Partition => cmd_partition(cli, &out),
        Cmd::ClientUpdate { backbone, client } => {
            cmd_client_update(cli, &out, backbone, *client)
        }
        Cmd::ServerUpdate { backbone, uploads } => {
            cmd_server_update(cli, &out, backbone, uploads)
        }
        Cmd::Run => cmd_run(cli, &out),
        Cmd::Fedavg => cmd_baseline(cli, &out, "fedavg"),
        Cmd::Central => cmd_baseline(cli, &out, "central"),
        Cmd::EvalPrivacy => cmd_eval_privacy(cli, &out),
        Cmd::Compare { files, csv } => cmd_compare(files, csv.as_deref()),
        Cmd::Plot { files, x_key, out: dest } => cmd_plot(&out, files, x_key, dest.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
