//! End-to-end experiment orchestration.
//!
//! A run builds the benchmark, partitions it, executes the one-shot
//! protocol (or a baseline), evaluates the served classifier, and emits a
//! schema-versioned [`ExperimentResult`]. All randomness is keyed through
//! the scoped streams, so outputs are byte-identical regardless of the
//! worker count.

use rayon::prelude::*;
use serde_json::{Map, Value};
use std::collections::BTreeMap;
use std::time::Instant;

use crate::baselines::{central, fedavg};
use crate::benchmark::{GroupedDataset, SyntheticBenchmarkSpec, generate_benchmark};
use crate::classifier::Classifier;
use crate::client::{client_update, mix_latents};
use crate::config::{PartitionMode, RunConfig};
use crate::error::{Error, Result};
use crate::ldm::{LdmParams, pretrain::PretrainReport, pretrain::pretrain};
use crate::partition::{Partition, dirichlet_split, domain_split};
use crate::privacy_eval::{GaussianityReport, MiaReport, latent_gaussianity, mia_gap, nn_retrieval};
use crate::rng::{RngScope, derive_rng, derive_rng_sub};
use crate::server::{DomainAccuracy, SERVER_STREAM_ID, SyntheticExample, evaluate_by_domain, server_update};
use crate::types::{ClientUpload, LabeledExample};

pub const RESULT_SCHEMA_VERSION: u32 = 1;

/// Everything a run (or baseline) needs: the pretraining corpora, the
/// federated train split, the held-out test set, and the client
/// partition. Deterministic given the config.
pub struct Environment {
    /// Full corpus for the autoencoder stage (the broad visual prior).
    pub ae_corpus: GroupedDataset,
    /// Denoiser-stage corpus; excludes the rare domain when one is set.
    pub pretrain_corpus: GroupedDataset,
    pub train: GroupedDataset,
    pub test: GroupedDataset,
    pub partition: Partition,
}

pub fn build_environment(cfg: &RunConfig) -> Result<Environment> {
    cfg.validate()?;
    let spec = |per_cell| SyntheticBenchmarkSpec {
        classes: cfg.classes,
        domains: cfg.domains,
        per_cell,
        image_size: cfg.dims.image_size,
    };
    let gen_rng = |sub| derive_rng_sub(cfg.seed, RngScope::Partition, SERVER_STREAM_ID, &[sub]);
    let ae_corpus = generate_benchmark(&spec(cfg.pretrain_per_cell), &mut gen_rng(0))?;
    let pretrain_corpus = match cfg.rare_domain {
        Some(rare) => {
            let keep: Vec<usize> = (0..cfg.domains).filter(|&d| d != rare).collect();
            ae_corpus.restrict_domains(&keep)
        }
        None => ae_corpus.clone(),
    };
    let train = generate_benchmark(&spec(cfg.train_per_cell), &mut gen_rng(1))?;
    let test = generate_benchmark(&spec(cfg.test_per_cell), &mut gen_rng(2))?;
    let mut part_rng = gen_rng(3);
    let partition = match cfg.partition_mode {
        PartitionMode::Domain => {
            domain_split(&train, cfg.shots_per_class, cfg.clients_per_domain, &mut part_rng)?
        }
        PartitionMode::Dirichlet => {
            let flat: Vec<LabeledExample> = train
                .examples
                .iter()
                .map(|e| LabeledExample { image: e.image.clone(), label: e.class })
                .collect();
            dirichlet_split(&flat, cfg.num_clients, cfg.dirichlet_beta, &mut part_rng)?
        }
    };
    Ok(Environment { ae_corpus, pretrain_corpus, train, test, partition })
}

/// Pretrains the backbone on the environment's corpora with the reserved
/// server-side stream.
pub fn pretrain_backbone(env: &Environment, cfg: &RunConfig) -> Result<(LdmParams, PretrainReport)> {
    let mut rng = derive_rng_sub(cfg.seed, RngScope::Train, SERVER_STREAM_ID, &[1]);
    pretrain(&env.ae_corpus, &env.pretrain_corpus, cfg, &mut rng)
}

/// One experiment's metrics, with the config echoed for provenance.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub label: String,
    /// Protocol that produced the served classifier.
    pub method: String,
    pub seed: u64,
    pub config: Map<String, Value>,
    /// Identifies the evaluation benchmark; comparisons across differing
    /// ids are rejected.
    pub benchmark_id: String,
    pub accuracy: DomainAccuracy,
    pub mia: MiaReport,
    pub gaussianity: Option<GaussianityReport>,
    pub retrieval_mean_top1: Option<f64>,
    pub num_clients: usize,
    pub synthetic_count: usize,
    pub upload_bytes: usize,
    pub timings_secs: BTreeMap<String, f64>,
    pub code_version: String,
}

impl ExperimentResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn benchmark_id(cfg: &RunConfig) -> String {
    format!(
        "classes={};domains={};image={};train={};test={}",
        cfg.classes, cfg.domains, cfg.dims.image_size, cfg.train_per_cell, cfg.test_per_cell
    )
}

fn members_of(partition: &Partition) -> Vec<LabeledExample> {
    partition.clients.iter().flat_map(|c| c.examples.iter().cloned()).collect()
}

fn test_examples(test: &GroupedDataset) -> Vec<LabeledExample> {
    test.examples
        .iter()
        .map(|e| LabeledExample { image: e.image.clone(), label: e.class })
        .collect()
}

/// Maximum synthetic/real images fed to the retrieval probe; retrieval is
/// quadratic and only needs a representative sample.
const RETRIEVAL_CAP: usize = 64;

/// Outputs of a full one-shot run, including the artifacts the metrics
/// were computed from.
pub struct FedBipRun {
    pub result: ExperimentResult,
    pub model: LdmParams,
    pub classifier: Classifier,
    pub synthetic: Vec<SyntheticExample>,
    pub uploads: Vec<ClientUpload>,
}

/// The full one-shot protocol: pretrain (unless a backbone is supplied),
/// client updates in parallel, server synthesis and training, then the
/// evaluation battery.
pub fn run_fedbip(
    cfg: &RunConfig,
    label: &str,
    workers: usize,
    backbone: Option<LdmParams>,
) -> Result<FedBipRun> {
    let mut timings = BTreeMap::new();
    let t0 = Instant::now();
    let env = build_environment(cfg)?;
    timings.insert("benchmark".into(), t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let model = match backbone {
        Some(m) => m,
        None => pretrain_backbone(&env, cfg)?.0,
    };
    timings.insert("pretrain".into(), t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let uploads = client_updates(&model, &env.partition, cfg, workers)?;
    timings.insert("client_updates".into(), t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let upload_refs: Vec<&ClientUpload> = uploads.iter().collect();
    let outcome = server_update(&model, &upload_refs, cfg)?;
    timings.insert("server_update".into(), t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let accuracy = evaluate_by_domain(&outcome.classifier, &env.test);
    let members = members_of(&env.partition);
    let non_members = test_examples(&env.test);
    let mia = mia_gap(&outcome.classifier, &members, &non_members)?;
    let gaussianity = if cfg.ablation.use_instance {
        Some(upload_gaussianity(&model, &env.partition, cfg, &uploads)?)
    } else {
        None
    };
    let synthetic_imgs: Vec<_> = outcome
        .synthetic
        .iter()
        .take(RETRIEVAL_CAP)
        .map(|s| s.image.clone())
        .collect();
    let real_imgs: Vec<_> =
        members.iter().take(RETRIEVAL_CAP).map(|e| e.image.clone()).collect();
    let retrieval = nn_retrieval(&outcome.classifier, &synthetic_imgs, &real_imgs, 1)?;
    timings.insert("evaluation".into(), t0.elapsed().as_secs_f64());

    let result = ExperimentResult {
        schema_version: RESULT_SCHEMA_VERSION,
        label: label.to_string(),
        method: "fedbip".into(),
        seed: cfg.seed,
        config: cfg.to_flat_map(),
        benchmark_id: benchmark_id(cfg),
        accuracy,
        mia,
        gaussianity,
        retrieval_mean_top1: Some(retrieval.mean_top1),
        num_clients: env.partition.clients.len(),
        synthetic_count: outcome.synthetic.len(),
        upload_bytes: uploads.iter().map(|u| u.payload_bytes()).sum(),
        timings_secs: timings,
        code_version: env!("CARGO_PKG_VERSION").into(),
    };
    Ok(FedBipRun {
        result,
        model,
        classifier: outcome.classifier,
        synthetic: outcome.synthetic,
        uploads,
    })
}

/// Runs every client's update, on a dedicated thread pool when
/// `workers > 0`. Client streams are keyed by client id, so the result is
/// identical for any pool size.
pub fn client_updates(
    model: &LdmParams,
    partition: &Partition,
    cfg: &RunConfig,
    workers: usize,
) -> Result<Vec<ClientUpload>> {
    let work = || {
        partition
            .clients
            .par_iter()
            .map(|c| client_update(model, c, cfg).map(|(u, _)| u))
            .collect::<Result<Vec<_>>>()
    };
    if workers == 0 {
        work()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
        pool.install(work)
    }
}

/// Reconstructs each client's pre-noise mixes from its gamma stream and
/// compares their distribution against the uploaded terminal latents.
fn upload_gaussianity(
    model: &LdmParams,
    partition: &Partition,
    cfg: &RunConfig,
    uploads: &[ClientUpload],
) -> Result<GaussianityReport> {
    let mut z0 = Vec::new();
    for c in &partition.clients {
        let mut gamma_rng = derive_rng(cfg.seed, RngScope::Gamma, c.client_id);
        for (z, _) in mix_latents(model, c, cfg, &mut gamma_rng)? {
            z0.extend(z.values().iter().copied());
        }
    }
    let mut zt = Vec::new();
    for u in uploads {
        for (z, _) in &u.latents {
            zt.extend(z.values().iter().copied());
        }
    }
    latent_gaussianity(&z0, &zt)
}

fn baseline_result(
    cfg: &RunConfig,
    label: &str,
    method: &str,
    env: &Environment,
    clf: &Classifier,
    upload_bytes: usize,
    timings: BTreeMap<String, f64>,
) -> Result<ExperimentResult> {
    let accuracy = evaluate_by_domain(clf, &env.test);
    let mia = mia_gap(clf, &members_of(&env.partition), &test_examples(&env.test))?;
    Ok(ExperimentResult {
        schema_version: RESULT_SCHEMA_VERSION,
        label: label.to_string(),
        method: method.to_string(),
        seed: cfg.seed,
        config: cfg.to_flat_map(),
        benchmark_id: benchmark_id(cfg),
        accuracy,
        mia,
        gaussianity: None,
        retrieval_mean_top1: None,
        num_clients: env.partition.clients.len(),
        synthetic_count: 0,
        upload_bytes,
        timings_secs: timings,
        code_version: env!("CARGO_PKG_VERSION").into(),
    })
}

/// Multi-round FedAvg on the same partition, evaluated like a run.
pub fn run_fedavg(cfg: &RunConfig, label: &str) -> Result<(ExperimentResult, Classifier)> {
    let mut timings = BTreeMap::new();
    let t0 = Instant::now();
    let env = build_environment(cfg)?;
    timings.insert("benchmark".into(), t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let clients: Vec<_> = env.partition.clients.iter().collect();
    let outcome = fedavg(&clients, cfg.classes, cfg)?;
    timings.insert("fedavg".into(), t0.elapsed().as_secs_f64());
    let result = baseline_result(
        cfg,
        label,
        "fedavg",
        &env,
        &outcome.classifier,
        outcome.communication.total_upload_bytes,
        timings,
    )?;
    Ok((result, outcome.classifier))
}

/// Centralized training on the pooled client data (the privacy-free upper
/// reference); uploads are counted as zero since nothing is federated.
pub fn run_central(cfg: &RunConfig, label: &str) -> Result<(ExperimentResult, Classifier)> {
    let mut timings = BTreeMap::new();
    let t0 = Instant::now();
    let env = build_environment(cfg)?;
    timings.insert("benchmark".into(), t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let pooled = members_of(&env.partition);
    let (clf, _) = central(&pooled, cfg.classes, cfg.classifier_epochs, cfg)?;
    timings.insert("central".into(), t0.elapsed().as_secs_f64());
    let result = baseline_result(cfg, label, "central", &env, &clf, 0, timings)?;
    Ok((result, clf))
}

/// Projects classifier features of several image sets into a shared 2-D
/// PCA space, writes a scatter plot, and returns each set's centroid in
/// that space (set order preserved).
pub fn feature_scatter(
    clf: &Classifier,
    sets: &[(String, Vec<crate::types::Image>, [u8; 3])],
    path: &std::path::Path,
) -> Result<Vec<[f64; 2]>> {
    let all: Vec<ndarray::Array1<f64>> = sets
        .iter()
        .flat_map(|(_, imgs, _)| imgs.iter().map(|i| clf.features(i.pixels())))
        .collect();
    let proj = crate::plot::pca_2d(&all)?;
    let mut series = Vec::with_capacity(sets.len());
    let mut centroids = Vec::with_capacity(sets.len());
    let mut offset = 0;
    for (label, imgs, color) in sets {
        let points = proj[offset..offset + imgs.len()].to_vec();
        offset += imgs.len();
        centroids.push(crate::plot::centroid(&points));
        series.push(crate::plot::Series { label: label.clone(), points, color: *color });
    }
    crate::plot::scatter_png(path, &series)?;
    Ok(centroids)
}

/// Per-label mean and sample standard deviation of macro accuracy.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CompareRow {
    pub label: String,
    pub n: usize,
    pub mean_accuracy: f64,
    /// Sample std (n - 1 denominator); 0 for a single run.
    pub std_accuracy: f64,
    pub mean_loss_gap: f64,
}

/// Aggregates results by label. All inputs must share one schema version
/// and one benchmark id, otherwise the comparison is rejected.
pub fn compare(results: &[ExperimentResult]) -> Result<Vec<CompareRow>> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("nothing to compare".into()));
    }
    if results.iter().any(|r| r.schema_version != results[0].schema_version) {
        return Err(Error::InvalidArgument(
            "results carry mixed schema versions; regenerate them with one build".into(),
        ));
    }
    if results.iter().any(|r| r.benchmark_id != results[0].benchmark_id) {
        return Err(Error::InvalidArgument(format!(
            "results evaluate different benchmarks ({})",
            results
                .iter()
                .map(|r| r.benchmark_id.as_str())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect::<Vec<_>>()
                .join(" vs ")
        )));
    }
    let mut by_label: BTreeMap<&str, Vec<&ExperimentResult>> = BTreeMap::new();
    for r in results {
        by_label.entry(&r.label).or_default().push(r);
    }
    Ok(by_label
        .into_iter()
        .map(|(label, rs)| {
            let n = rs.len();
            let accs: Vec<f64> = rs.iter().map(|r| r.accuracy.macro_avg).collect();
            let mean = accs.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            let mean_gap = rs.iter().map(|r| r.mia.loss_gap).sum::<f64>() / n as f64;
            CompareRow {
                label: label.to_string(),
                n,
                mean_accuracy: mean,
                std_accuracy: std,
                mean_loss_gap: mean_gap,
            }
        })
        .collect())
}

/// Fixed-width text rendering of a comparison.
pub fn render_compare(rows: &[CompareRow]) -> String {
    let mut out = String::from("label                     n   accuracy (mean +/- std)   mia loss gap\n");
    for r in rows {
        out.push_str(&format!(
            "{:<24} {:>3}   {:.4} +/- {:.4}          {:+.4}\n",
            r.label, r.n, r.mean_accuracy, r.std_accuracy, r.mean_loss_gap
        ));
    }
    out
}
