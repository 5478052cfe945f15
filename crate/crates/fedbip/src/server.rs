//! Server-side pipeline: concept perturbation, conditioned synthesis
//! from the one-shot uploads, and downstream classifier training.
//!
//! Every random draw is keyed by (seed, scope, client id, pass, index),
//! so the synthetic dataset is a set-valued function of the uploads:
//! reordering clients or parallelizing changes nothing.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::benchmark::GroupedDataset;
use crate::classifier::{Classifier, accuracy, train_epochs};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ldm::{LdmParams, SlotValue, sample};
use crate::rng::{RngScope, derive_rng, derive_rng_sub};
use crate::types::{ClientUpload, LabeledExample};

/// Client id reserved for server-side streams; client ids collide with it
/// only after 2^64 - 1 real clients.
pub const SERVER_STREAM_ID: u64 = u64::MAX;

/// S + eta with eta ~ N(0, sigma^2 I) where sigma = sigma_rel * RMS(S).
/// A zero matrix stays fixed (its RMS is zero).
pub fn perturb_domain_concept(s: &Array2<f64>, sigma_rel: f64, rng: &mut impl Rng) -> Array2<f64> {
    let rms = (s.mapv(|v| v * v).mean().unwrap_or(0.0)).sqrt();
    let sigma = sigma_rel * rms;
    if sigma == 0.0 {
        return s.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    s.mapv(|v| v + normal.sample(rng))
}

/// One synthesized training example with its provenance.
#[derive(Debug, Clone)]
pub struct SyntheticExample {
    pub image: crate::types::Image,
    pub label: usize,
    pub client_id: u64,
    pub pass: usize,
}

fn check_one_shot(uploads: &[&ClientUpload]) -> Result<()> {
    let mut ids: Vec<u64> = uploads.iter().map(|u| u.client_id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::OneShotViolation(w[0]));
    }
    Ok(())
}

/// Expands the uploads into `multiplier` generation passes per latent.
///
/// Pass 0 runs the deterministic (eta = 0) sampler on the uploaded
/// latents themselves; later passes re-noise with pass-keyed streams, so
/// with multiplier = 1 and no perturbation the output is a deterministic
/// function of the uploads.
pub fn synthesize(
    model: &LdmParams,
    uploads: &[&ClientUpload],
    cfg: &RunConfig,
) -> Result<Vec<SyntheticExample>> {
    check_one_shot(uploads)?;
    let mut sorted: Vec<&ClientUpload> = uploads.to_vec();
    sorted.sort_by_key(|u| u.client_id);

    let num_classes = model.num_classes();
    let mut out = Vec::new();
    for upload in sorted {
        if upload.concepts.num_classes() != num_classes {
            return Err(Error::ShapeMismatch {
                expected: format!("{num_classes} classes"),
                actual: format!("{}", upload.concepts.num_classes()),
            });
        }
        let id = upload.client_id;
        for pass in 0..cfg.multiplier {
            // Style slot: perturbed learned concept, or the client's
            // domain token when concept-level personalization is off.
            let s_hat: Array2<f64> = if cfg.ablation.use_perturbation {
                let mut rng = derive_rng_sub(cfg.seed, RngScope::Perturb, id, &[pass as u64]);
                perturb_domain_concept(&upload.concepts.s, cfg.sigma_eta_rel, &mut rng)
            } else {
                upload.concepts.s.clone()
            };
            let style = if cfg.ablation.use_concept_s {
                SlotValue::Concept(&s_hat)
            } else {
                SlotValue::Vocab(model.vocab.domain_token(upload.domain_id.unwrap_or(0))?)
            };
            // One conditioning vector per class present in this upload.
            let mut conds: Vec<Option<Array1<f64>>> = vec![None; num_classes];
            for &(_, y) in &upload.latents {
                if conds[y].is_some() {
                    continue;
                }
                let v_rows = upload.concepts.v.index_axis(ndarray::Axis(0), y).to_owned();
                let class = if cfg.ablation.use_concept_v && upload.concepts.optimized[y] {
                    SlotValue::Concept(&v_rows)
                } else {
                    SlotValue::Vocab(model.vocab.class_token(y)?)
                };
                conds[y] = Some(model.condition(&style, &class)?);
            }
            for (i, (z, y)) in upload.latents.iter().enumerate() {
                let cond = conds[*y].as_ref().expect("conditioning built above");
                let mut rng =
                    derive_rng_sub(cfg.seed, RngScope::Sampler, id, &[pass as u64, i as u64]);
                let eta = if pass == 0 { 0.0 } else { 1.0 };
                let z_out = sample(
                    &model.denoiser,
                    &model.schedule,
                    z,
                    cond,
                    cfg.sample_steps,
                    eta,
                    &mut rng,
                )?;
                out.push(SyntheticExample {
                    image: model.decode(&z_out)?,
                    label: *y,
                    client_id: id,
                    pass,
                });
            }
        }
    }
    Ok(out)
}

/// Per-domain and macro-averaged accuracy on a grouped test set.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DomainAccuracy {
    pub per_domain: Vec<f64>,
    pub macro_avg: f64,
}

pub fn evaluate_by_domain(clf: &Classifier, test: &GroupedDataset) -> DomainAccuracy {
    let per_domain: Vec<f64> = (0..test.num_domains())
        .map(|d| {
            let data: Vec<LabeledExample> = test
                .examples
                .iter()
                .filter(|e| e.domain == d)
                .map(|e| LabeledExample { image: e.image.clone(), label: e.class })
                .collect();
            accuracy(clf, &data)
        })
        .collect();
    let macro_avg = per_domain.iter().sum::<f64>() / per_domain.len().max(1) as f64;
    DomainAccuracy { per_domain, macro_avg }
}

/// The server's complete one-shot round: verify, synthesize, train.
pub struct ServerOutcome {
    pub classifier: Classifier,
    pub synthetic: Vec<SyntheticExample>,
    pub train_trace: Vec<f64>,
}

pub fn server_update(
    model: &LdmParams,
    uploads: &[&ClientUpload],
    cfg: &RunConfig,
) -> Result<ServerOutcome> {
    if uploads.is_empty() {
        return Err(Error::InvalidArgument("server received no uploads".into()));
    }
    let synthetic = synthesize(model, uploads, cfg)?;
    let data: Vec<LabeledExample> = synthetic
        .iter()
        .map(|s| LabeledExample { image: s.image.clone(), label: s.label })
        .collect();
    let mut rng = derive_rng(cfg.seed, RngScope::Train, SERVER_STREAM_ID);
    let mut classifier = Classifier::new(model.num_classes(), &mut rng);
    let train_trace = train_epochs(
        &mut classifier,
        &data,
        cfg.classifier_epochs,
        cfg.classifier_lr,
        cfg.classifier_momentum,
        cfg.classifier_batch,
        &mut rng,
    )?;
    Ok(ServerOutcome { classifier, synthetic, train_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::client_update;
    use crate::config::ModelDims;
    use crate::ldm::pretrain;
    use crate::partition::domain_split;
    use crate::benchmark::{SyntheticBenchmarkSpec, generate_benchmark};

    fn small_cfg() -> RunConfig {
        RunConfig {
            dims: ModelDims {
                image_size: 16,
                latent_h: 4,
                latent_w: 4,
                latent_c: 2,
                d_w: 8,
                d_cond: 6,
                hidden: 6,
                t_max: 50,
                ..ModelDims::default()
            },
            ae_epochs: 2,
            denoiser_epochs: 2,
            n_step: 5,
            sample_steps: 10,
            multiplier: 2,
            classifier_epochs: 2,
            shots_per_class: 4,
            ..RunConfig::default()
        }
    }

    fn fixture() -> (LdmParams, Vec<ClientUpload>, RunConfig) {
        let cfg = small_cfg();
        let spec = SyntheticBenchmarkSpec { classes: 3, domains: 2, per_cell: 4, image_size: 16 };
        let mut rng = derive_rng(60, RngScope::Partition, 0);
        let bench = generate_benchmark(&spec, &mut rng).unwrap();
        let (model, _) = pretrain(&bench, &bench, &cfg, &mut derive_rng(60, RngScope::Train, 0)).unwrap();
        let partition = domain_split(&bench, cfg.shots_per_class, 1, &mut rng).unwrap();
        let uploads = partition
            .clients
            .iter()
            .map(|c| client_update(&model, c, &cfg).unwrap().0)
            .collect();
        (model, uploads, cfg)
    }

    #[test]
    fn duplicate_client_id_is_one_shot_violation() {
        let (model, uploads, cfg) = fixture();
        let dup = vec![&uploads[0], &uploads[1], &uploads[0]];
        match synthesize(&model, &dup, &cfg) {
            Err(Error::OneShotViolation(id)) => assert_eq!(id, uploads[0].client_id),
            other => panic!("expected one-shot violation, got {:?}", other.map(|v| v.len())),
        }
    }

    #[test]
    fn synthesis_is_order_invariant() {
        let (model, uploads, cfg) = fixture();
        let fwd: Vec<&ClientUpload> = uploads.iter().collect();
        let rev: Vec<&ClientUpload> = uploads.iter().rev().collect();
        let a = synthesize(&model, &fwd, &cfg).unwrap();
        let b = synthesize(&model, &rev, &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.client_id, y.client_id);
            assert_eq!(x.label, y.label);
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn multiplier_scales_output_and_passes_differ() {
        let (model, uploads, cfg) = fixture();
        let refs: Vec<&ClientUpload> = uploads.iter().collect();
        let n_latents: usize = uploads.iter().map(|u| u.latents.len()).sum();
        let out = synthesize(&model, &refs, &cfg).unwrap();
        assert_eq!(out.len(), n_latents * cfg.multiplier);
        // The stochastic second pass must differ from the deterministic
        // first one for the same latent.
        let first = out.iter().find(|s| s.pass == 0).unwrap();
        let second = out
            .iter()
            .find(|s| s.pass == 1 && s.client_id == first.client_id && s.label == first.label)
            .unwrap();
        assert_ne!(first.image, second.image);
    }

    #[test]
    fn deterministic_when_single_pass_without_perturbation() {
        let (model, uploads, mut cfg) = fixture();
        cfg.multiplier = 1;
        cfg.ablation.use_perturbation = false;
        let refs: Vec<&ClientUpload> = uploads.iter().collect();
        let a = synthesize(&model, &refs, &cfg).unwrap();
        let b = synthesize(&model, &refs, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn perturbation_moves_s_by_the_right_amount() {
        let mut rng = derive_rng(61, RngScope::Perturb, 0);
        let s = Array2::from_shape_fn((4, 16), |_| {
            use rand::RngExt;
            rng.random_range(-1.0..1.0f64)
        });
        let rms = (s.mapv(|v| v * v).mean().unwrap()).sqrt();
        let n = 200;
        let mut dev = 0.0;
        for _ in 0..n {
            let p = perturb_domain_concept(&s, 0.1, &mut rng);
            dev += (&p - &s).mapv(|v| v * v).mean().unwrap();
        }
        let observed = (dev / n as f64).sqrt();
        let expected = 0.1 * rms;
        assert!(
            (observed - expected).abs() / expected < 0.05,
            "perturbation RMS {observed} vs {expected}"
        );
        // sigma_rel = 0 is the identity.
        let p = perturb_domain_concept(&s, 0.0, &mut rng);
        assert_eq!(p, s);
    }

    #[test]
    fn server_update_trains_a_classifier() {
        let (model, uploads, cfg) = fixture();
        let refs: Vec<&ClientUpload> = uploads.iter().collect();
        let outcome = server_update(&model, &refs, &cfg).unwrap();
        assert_eq!(outcome.train_trace.len(), cfg.classifier_epochs);
        assert_eq!(outcome.classifier.num_classes(), 3);
        assert!(!outcome.synthetic.is_empty());
    }
}
