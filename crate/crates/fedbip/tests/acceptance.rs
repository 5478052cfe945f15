//! End-to-end acceptance battery. Each test covers one numbered
//! criterion and prints a single pass/fail line; the experiment-level
//! criteria share cached backbones and runs across tests to stay within
//! a desk-scale time budget.

use ndarray::{Array2, Array3};
use rand::RngExt;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::BTreeMap;
use std::sync::Mutex;

use fedbip::config::{AblationToggles, ModelDims, RunConfig};
use fedbip::container::{read_upload, write_upload};
use fedbip::error::Error;
use fedbip::ldm::pretrain::PretrainReport;
use fedbip::ldm::{
    FINAL_ALPHA_BAR, LdmParams, LossExample, SlotValue, forward_diffuse, ldm_loss_fixed,
    ldm_loss_fixed_grad,
};
use fedbip::partition::dirichlet_split;
use fedbip::pipeline::{
    ExperimentResult, build_environment, client_updates, pretrain_backbone, run_fedavg,
    run_fedbip,
};
use fedbip::rng::{RngScope, derive_rng};
use fedbip::server::{evaluate_by_domain, server_update, synthesize};
use fedbip::types::{ClientDataset, LatentTensor, NoiseSchedule};

const SEEDS: [u64; 3] = [101, 102, 103];

/// Prints the per-criterion verdict line and fails the test on `false`.
fn verdict(num: u32, name: &str, ok: bool, detail: &str) {
    let word = if ok { "pass" } else { "fail" };
    println!("criterion {num:02} ({name}): {word} [{detail}]");
    assert!(ok, "criterion {num} ({name}) failed: {detail}");
}

/// The shared desk-scale benchmark: two domains with the second withheld
/// from pretraining, sized so the experiment criteria finish in minutes.
fn accept_cfg(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        classes: 3,
        domains: 2,
        rare_domain: Some(1),
        train_per_cell: 6,
        test_per_cell: 8,
        pretrain_per_cell: 16,
        shots_per_class: 3,
        clients_per_domain: 1,
        dims: ModelDims {
            image_size: 16,
            latent_h: 4,
            latent_w: 4,
            latent_c: 2,
            d_w: 8,
            d_cond: 6,
            hidden: 6,
            t_max: 50,
            n_s: 2,
            n_v: 2,
            ..ModelDims::default()
        },
        ae_epochs: 12,
        denoiser_epochs: 20,
        n_step: 40,
        sample_steps: 16,
        classifier_epochs: 8,
        multiplier: 2,
        fedavg_rounds: 20,
        ..RunConfig::default()
    }
}

fn toggles(i: bool, s: bool, v: bool, p: bool) -> AblationToggles {
    AblationToggles {
        use_instance: i,
        use_concept_s: s,
        use_concept_v: v,
        use_perturbation: p,
    }
}

/// Pretrained backbone per seed, shared across criteria. The ablation
/// toggles do not touch pretraining, so one backbone serves every
/// variant of a seed.
fn backbone(seed: u64) -> (LdmParams, PretrainReport) {
    static CACHE: Mutex<BTreeMap<u64, (LdmParams, PretrainReport)>> = Mutex::new(BTreeMap::new());
    let mut cache = CACHE.lock().unwrap();
    cache
        .entry(seed)
        .or_insert_with(|| {
            let cfg = accept_cfg(seed);
            let env = build_environment(&cfg).expect("environment");
            pretrain_backbone(&env, &cfg).expect("pretraining")
        })
        .clone()
}

/// One-shot run for a (seed, variant) pair, cached because several
/// criteria read the same runs.
fn full_run(seed: u64, variant: &str) -> ExperimentResult {
    static CACHE: Mutex<BTreeMap<String, ExperimentResult>> = Mutex::new(BTreeMap::new());
    let key = format!("{seed}-{variant}");
    let mut cache = CACHE.lock().unwrap();
    cache
        .entry(key)
        .or_insert_with(|| {
            let mut cfg = accept_cfg(seed);
            match variant {
                "full" => {}
                "instance" => cfg.ablation = toggles(true, false, false, false),
                "prompt" => cfg.ablation = toggles(false, false, false, false),
                "m2" => cfg.multiplier = 2,
                "m10" => cfg.multiplier = 10,
                other => panic!("unknown variant {other}"),
            }
            let (model, _) = backbone(seed);
            run_fedbip(&cfg, variant, 0, Some(model)).expect("one-shot run").result
        })
        .clone()
}

fn fedavg_run(seed: u64) -> ExperimentResult {
    static CACHE: Mutex<BTreeMap<u64, ExperimentResult>> = Mutex::new(BTreeMap::new());
    let mut cache = CACHE.lock().unwrap();
    cache
        .entry(seed)
        .or_insert_with(|| {
            let cfg = accept_cfg(seed);
            run_fedavg(&cfg, "fedavg").expect("fedavg run").0
        })
        .clone()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn criterion_01_forward_process_moments() {
    let t_max = 100;
    let schedule = NoiseSchedule::linear(t_max, FINAL_ALPHA_BAR).unwrap();
    let z0 = LatentTensor::new(Array3::from_shape_fn((2, 2, 1), |(i, j, _)| {
        0.3 * (i as f64) - 0.5 * (j as f64) + 0.7
    }))
    .unwrap();

    // t = 0: the identity, exactly.
    let zero_eps = Array3::zeros((2, 2, 1));
    let z_at_0 = forward_diffuse(&z0, 0, &zero_eps, &schedule).unwrap();
    let identity = z_at_0.values() == z0.values();

    // Mid-schedule Monte Carlo: per-entry mean sqrt(ab) z0, variance 1 - ab.
    let t = t_max / 2;
    let ab = schedule.alpha_bar(t).unwrap();
    let normal = Normal::new(0.0_f64, 1.0).unwrap();
    let mut rng = derive_rng(400, RngScope::Noise, 0);
    let draws = 10_000;
    let mut sums = Array3::<f64>::zeros((2, 2, 1));
    let mut sq_sums = Array3::<f64>::zeros((2, 2, 1));
    for _ in 0..draws {
        let eps = Array3::from_shape_fn((2, 2, 1), |_| normal.sample(&mut rng));
        let zt = forward_diffuse(&z0, t, &eps, &schedule).unwrap();
        sums += zt.values();
        sq_sums += &zt.values().mapv(|v| v * v);
    }
    let mean_arr = sums / draws as f64;
    let expected_mean = z0.values() * ab.sqrt();
    let mean_err = (&mean_arr - &expected_mean).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
    let var_arr = sq_sums / draws as f64 - mean_arr.mapv(|m| m * m);
    let var_err =
        var_arr.mapv(|v| (v - (1.0 - ab)).abs()).iter().cloned().fold(0.0, f64::max);

    verdict(
        1,
        "forward-process moments",
        identity && mean_err < 0.05 && var_err < 0.05,
        &format!("identity at t=0: {identity}, mean err {mean_err:.4}, var err {var_err:.4}"),
    );
}

#[test]
fn criterion_02_concept_gradient_fidelity() {
    let dims = ModelDims {
        image_size: 16,
        latent_h: 4,
        latent_w: 4,
        latent_c: 2,
        d_w: 6,
        d_cond: 5,
        hidden: 5,
        t_max: 40,
        n_s: 2,
        n_v: 2,
        ..ModelDims::default()
    };
    let mut rng = derive_rng(77, RngScope::ConceptInit, 0);
    let model = LdmParams::new(
        &dims,
        &["d0".into(), "d1".into()],
        &["c0".into(), "c1".into(), "c2".into()],
        &mut rng,
    )
    .unwrap();
    let z0 = LatentTensor::new(Array3::from_shape_fn((4, 4, 2), |_| rng.random_range(-1.0..1.0)))
        .unwrap();
    let s = Array2::from_shape_fn((dims.n_s, dims.d_w), |_| rng.random_range(-0.5..0.5));
    let v = Array2::from_shape_fn((dims.n_v, dims.d_w), |_| rng.random_range(-0.5..0.5));
    let t = 17;
    let normal = Normal::new(0.0_f64, 1.0).unwrap();
    let eps = Array3::from_shape_fn((4, 4, 2), |_| normal.sample(&mut rng));

    let mut denoiser = model.denoiser.clone();
    let mut conditioner = model.conditioner.clone();
    let ex = LossExample { z0: &z0, style: SlotValue::Concept(&s), class: SlotValue::Concept(&v) };
    let (_, grads) = ldm_loss_fixed_grad(
        &mut denoiser,
        &mut conditioner,
        &model.template,
        &model.schedule,
        &ex,
        t,
        &eps,
        1.0,
    )
    .unwrap();

    let loss_at = |s: &Array2<f64>, v: &Array2<f64>| {
        let ex =
            LossExample { z0: &z0, style: SlotValue::Concept(s), class: SlotValue::Concept(v) };
        ldm_loss_fixed(&model, &ex, t, &eps).unwrap()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (analytic, base) in [(&grads.style, &s), (&grads.class, &v)] {
        for i in 0..base.shape()[0] {
            for j in 0..base.shape()[1] {
                let mut plus = base.clone();
                plus[[i, j]] += h;
                let mut minus = base.clone();
                minus[[i, j]] -= h;
                let numeric = if std::ptr::eq(base, &s) {
                    (loss_at(&plus, &v) - loss_at(&minus, &v)) / (2.0 * h)
                } else {
                    (loss_at(&s, &plus) - loss_at(&s, &minus)) / (2.0 * h)
                };
                let denom = numeric.abs().max(analytic[[i, j]].abs()).max(1e-8);
                worst = worst.max((numeric - analytic[[i, j]]).abs() / denom);
            }
        }
    }
    verdict(
        2,
        "concept gradient fidelity",
        worst < 1e-3,
        &format!("worst relative error {worst:.2e}"),
    );
}

#[test]
fn criterion_03_pretraining_progress() {
    let (_, report) = backbone(SEEDS[0]);
    let denoise_ok = report.denoise_losses.last().unwrap()
        <= &(0.5 * report.denoise_losses.first().unwrap());
    let ae_ok = report.ae_losses.len() >= 3
        && report.ae_losses[1] < report.ae_losses[0]
        && report.ae_losses[2] < report.ae_losses[1];
    verdict(
        3,
        "pretraining progress",
        denoise_ok && ae_ok,
        &format!(
            "denoise {:.4} -> {:.4}, ae first epochs {:.5?}",
            report.denoise_losses.first().unwrap(),
            report.denoise_losses.last().unwrap(),
            &report.ae_losses[..3]
        ),
    );
}

#[test]
fn criterion_04_ablation_ordering() {
    let acc = |variant: &str| {
        mean(&SEEDS.map(|s| full_run(s, variant).accuracy.macro_avg))
    };
    let full = acc("full");
    let instance = acc("instance");
    let prompt = acc("prompt");
    let ok = full >= prompt + 0.05 && full >= instance - 1e-9 && instance >= prompt - 1e-9;
    verdict(
        4,
        "ablation ordering",
        ok,
        &format!("full {full:.4} >= instance {instance:.4} >= prompt {prompt:.4} (+5pt margin)"),
    );
}

#[test]
fn criterion_05_perturbation_changes_synthesis() {
    let seed = SEEDS[0];
    let cfg = accept_cfg(seed);
    let (model, _) = backbone(seed);
    let env = build_environment(&cfg).unwrap();
    let uploads = client_updates(&model, &env.partition, &cfg, 0).unwrap();
    let refs: Vec<_> = uploads.iter().collect();

    let mut cfg_zero = cfg.clone();
    cfg_zero.sigma_eta_rel = 0.0;
    let with = server_update(&model, &refs, &cfg).unwrap();
    let without = server_update(&model, &refs, &cfg_zero).unwrap();

    let labels_match = with
        .synthetic
        .iter()
        .zip(&without.synthetic)
        .all(|(a, b)| a.label == b.label && a.client_id == b.client_id && a.pass == b.pass);
    let pixel_diff = mean(
        &with
            .synthetic
            .iter()
            .zip(&without.synthetic)
            .map(|(a, b)| {
                (a.image.pixels() - b.image.pixels()).mapv(f64::abs).mean().unwrap()
            })
            .collect::<Vec<_>>(),
    );
    let acc_with = evaluate_by_domain(&with.classifier, &env.test).macro_avg;
    let acc_without = evaluate_by_domain(&without.classifier, &env.test).macro_avg;
    verdict(
        5,
        "perturbation ablation",
        labels_match && pixel_diff > 0.0,
        &format!(
            "mean abs pixel diff {pixel_diff:.5}, accuracy with/without perturbation \
             {acc_with:.4}/{acc_without:.4} (direction not asserted)"
        ),
    );
}

#[test]
fn criterion_06_multiplier_trend() {
    let m2: Vec<ExperimentResult> = SEEDS.iter().map(|&s| full_run(s, "m2")).collect();
    let m10: Vec<ExperimentResult> = SEEDS.iter().map(|&s| full_run(s, "m10")).collect();
    let acc2 = mean(&m2.iter().map(|r| r.accuracy.macro_avg).collect::<Vec<_>>());
    let acc10 = mean(&m10.iter().map(|r| r.accuracy.macro_avg).collect::<Vec<_>>());

    // Exact linearity: |D_syn| = m * total latent count.
    let cfg = accept_cfg(SEEDS[0]);
    let env = build_environment(&cfg).unwrap();
    let latents: usize = env.partition.clients.iter().map(|c| c.examples.len()).sum();
    let linear = m2.iter().all(|r| r.synthetic_count == 2 * latents)
        && m10.iter().all(|r| r.synthetic_count == 10 * latents);

    verdict(
        6,
        "multiplier trend",
        acc10 >= acc2 - 0.01 && linear,
        &format!("accuracy m=10 {acc10:.4} vs m=2 {acc2:.4}, |D_syn| linear: {linear}"),
    );
}

#[test]
fn criterion_07_privacy_direction() {
    let mut fb_loss = Vec::new();
    let mut fb_entropy = Vec::new();
    let mut fa_loss = Vec::new();
    let mut fa_entropy = Vec::new();
    let mut ks_ok = true;
    for &seed in &SEEDS {
        let fb = full_run(seed, "full");
        let fa = fedavg_run(seed);
        fb_loss.push(fb.mia.loss_gap.abs());
        fb_entropy.push(fb.mia.entropy_gap.abs());
        fa_loss.push(fa.mia.loss_gap.abs());
        fa_entropy.push(fa.mia.entropy_gap.abs());
        let g = fb.gaussianity.as_ref().expect("full runs report gaussianity");
        ks_ok &= g.ks_zt < g.ks_z0;
    }
    let loss_ok = mean(&fb_loss) <= 0.9 * mean(&fa_loss);
    let entropy_ok = mean(&fb_entropy) <= 0.9 * mean(&fa_entropy);
    verdict(
        7,
        "privacy direction",
        loss_ok && entropy_ok && ks_ok,
        &format!(
            "loss gap {:.4} vs fedavg {:.4}, entropy gap {:.4} vs {:.4}, ks(zT)<ks(z0) every \
             run: {ks_ok}",
            mean(&fb_loss),
            mean(&fa_loss),
            mean(&fb_entropy),
            mean(&fa_entropy)
        ),
    );
}

#[test]
fn criterion_08_protocol_invariants() {
    let seed = SEEDS[0];
    let cfg = accept_cfg(seed);
    let (model, _) = backbone(seed);
    let env = build_environment(&cfg).unwrap();
    let uploads = client_updates(&model, &env.partition, &cfg, 0).unwrap();

    // Exactly one upload per client: a duplicate is rejected.
    let dup = vec![&uploads[0], &uploads[0]];
    let one_shot = matches!(synthesize(&model, &dup, &cfg), Err(Error::OneShotViolation(_)));

    // Upload permutation leaves the synthetic set and training untouched.
    let fwd: Vec<_> = uploads.iter().collect();
    let rev: Vec<_> = uploads.iter().rev().collect();
    let a = server_update(&model, &fwd, &cfg).unwrap();
    let b = server_update(&model, &rev, &cfg).unwrap();
    let permutation_invariant = a.train_trace == b.train_trace
        && a.synthetic.len() == b.synthetic.len()
        && a.synthetic
            .iter()
            .zip(&b.synthetic)
            .all(|(x, y)| x.image.pixels() == y.image.pixels() && x.label == y.label);

    // Single-client FedAvg with one round of one local epoch is exactly
    // one epoch of centralized training.
    let pooled: Vec<_> =
        env.partition.clients.iter().flat_map(|c| c.examples.iter().cloned()).collect();
    let single = ClientDataset::new(0, pooled.clone(), None).unwrap();
    let mut cfg1 = cfg.clone();
    cfg1.fedavg_rounds = 1;
    cfg1.fedavg_local_epochs = 1;
    let fa = fedbip::baselines::fedavg(&[&single], cfg.classes, &cfg1).unwrap();
    let (ce, _) = fedbip::baselines::central(&pooled, cfg.classes, 1, &cfg1).unwrap();
    let fa_acc = evaluate_by_domain(&fa.classifier, &env.test).macro_avg;
    let ce_acc = evaluate_by_domain(&ce, &env.test).macro_avg;
    let fedavg_matches_central = (fa_acc - ce_acc).abs() <= 1e-6;

    // Serialization: a second write/read cycle reproduces the first read
    // bitwise (the wire format is the fixed point).
    let dir = tempfile::tempdir().unwrap();
    write_upload(&uploads[0], dir.path()).unwrap();
    let once = read_upload(dir.path()).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    write_upload(&once, dir2.path()).unwrap();
    let twice = read_upload(dir2.path()).unwrap();
    let round_trip = once.client_id == twice.client_id
        && once.concepts.s == twice.concepts.s
        && once.concepts.v == twice.concepts.v
        && once.latents.len() == twice.latents.len()
        && once
            .latents
            .iter()
            .zip(&twice.latents)
            .all(|((za, ya), (zb, yb))| za.values() == zb.values() && ya == yb);

    verdict(
        8,
        "protocol invariants",
        one_shot && permutation_invariant && fedavg_matches_central && round_trip,
        &format!(
            "one-shot: {one_shot}, permutation: {permutation_invariant}, fedavg==central: \
             {fedavg_matches_central} ({fa_acc:.6} vs {ce_acc:.6}), round trip: {round_trip}"
        ),
    );
}

#[test]
fn criterion_09_run_determinism_across_workers() {
    let seed = SEEDS[1];
    let cfg = accept_cfg(seed);
    let (model, _) = backbone(seed);
    let strip_timings = |mut r: ExperimentResult| {
        r.timings_secs.clear();
        r.to_json().unwrap()
    };
    let one = strip_timings(run_fedbip(&cfg, "det", 1, Some(model.clone())).unwrap().result);
    let four = strip_timings(run_fedbip(&cfg, "det", 4, Some(model)).unwrap().result);
    verdict(
        9,
        "determinism across workers",
        one == four,
        "all metrics identical for --workers 1 vs 4",
    );
}

#[test]
fn criterion_10_dirichlet_statistics() {
    let classes = 4;
    let per_class = 50;
    let k = 5;
    let data: Vec<_> = (0..classes * per_class)
        .map(|i| fedbip::types::LabeledExample {
            image: fedbip::types::Image::from_unclamped(Array3::zeros((4, 4, 3))).unwrap(),
            label: i % classes,
        })
        .collect();

    // Beta = 1000: class mass spreads uniformly over clients. Chi-square
    // of the (class x client) counts against uniform, pooled over trials.
    let trials = 100;
    let mut chi2 = 0.0;
    let mut df = 0.0;
    for trial in 0..trials {
        let mut rng = derive_rng(900, RngScope::Partition, trial);
        let part = dirichlet_split(&data, k, 1000.0, &mut rng).unwrap();
        for class in 0..classes {
            let counts: Vec<f64> = part
                .clients
                .iter()
                .map(|c| c.examples.iter().filter(|e| e.label == class).count() as f64)
                .collect();
            let expected = counts.iter().sum::<f64>() / k as f64;
            chi2 += counts.iter().map(|o| (o - expected).powi(2) / expected).sum::<f64>();
            df += (k - 1) as f64;
        }
    }
    let p = 1.0 - ChiSquared::new(df).unwrap().cdf(chi2);
    let uniform_ok = p > 0.01;

    // Beta = 0.01: each client is dominated by one class.
    let mut max_fracs = Vec::new();
    for trial in 0..trials {
        let mut rng = derive_rng(901, RngScope::Partition, trial);
        let part = dirichlet_split(&data, k, 0.01, &mut rng).unwrap();
        for c in &part.clients {
            if c.examples.is_empty() {
                continue;
            }
            let top = (0..classes)
                .map(|cl| c.examples.iter().filter(|e| e.label == cl).count())
                .max()
                .unwrap();
            max_fracs.push(top as f64 / c.examples.len() as f64);
        }
    }
    let concentration = mean(&max_fracs);
    verdict(
        10,
        "dirichlet splitter statistics",
        uniform_ok && concentration > 0.9,
        &format!(
            "beta=1000 chi-square p {p:.4} (df {df:.0}), beta=0.01 mean max-class fraction \
             {concentration:.3}"
        ),
    );
}
