//! Two-stage backbone pretraining.
//!
//! Stage one fits the autoencoder with a pixel reconstruction loss on a
//! broad corpus (the autoencoder is a general-purpose visual prior, so
//! it may see domains that are withheld from the generative stage). Stage
//! two freezes the encoder, precomputes clean latents, and trains the
//! denoiser and conditioner jointly on the noise-matching objective with
//! template prompts built from each example's domain and class tokens.

use ndarray::{Array2, Array3};
use rand::{Rng, RngExt};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::benchmark::GroupedDataset;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::Optimizer;
use crate::types::LatentTensor;

use super::conditioner::SlotValue;
use super::{LdmParams, LossExample, ldm_loss_fixed_grad};

/// Per-epoch loss traces for both stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean per-pixel reconstruction loss by epoch.
    pub ae_losses: Vec<f64>,
    /// Mean dim-summed denoising loss by epoch.
    pub denoise_losses: Vec<f64>,
}

/// A slot-shaped block of `n` copies of one token embedding, each row
/// perturbed by noise relative to the row's RMS. Training on these keeps
/// the denoiser well-behaved on concept vectors near the vocabulary
/// tokens — the regime personalized concepts and perturbed Ŝ live in.
fn augmented_rows(
    embed: &ndarray::Array2<f64>,
    token: usize,
    n: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let row = embed.row(token);
    let rms = row.mapv(|v| v * v).mean().unwrap_or(0.0).sqrt().max(1e-12);
    let normal = Normal::new(0.0, sigma * rms).expect("augmentation noise scale");
    Array2::from_shape_fn((n, row.len()), |(_, j)| row[j] + normal.sample(rng))
}

fn check_finite(stage: &str, epoch: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence(format!(
            "{stage} loss became non-finite at epoch {epoch}"
        )));
    }
    Ok(())
}

/// Trains a fresh backbone and returns it with the loss traces. The
/// autoencoder stage runs on `ae_corpus` (the broad visual prior); the
/// denoiser/conditioner stage runs on `denoise_corpus`, which may
/// withhold domains. The denoising corpus must cover at least two
/// classes; domains absent from it keep their vocabulary tokens at
/// random initialization.
pub fn pretrain(
    ae_corpus: &GroupedDataset,
    denoise_corpus: &GroupedDataset,
    cfg: &RunConfig,
    rng: &mut impl Rng,
) -> Result<(LdmParams, PretrainReport)> {
    if ae_corpus.examples.is_empty() || denoise_corpus.examples.is_empty() {
        return Err(Error::InvalidArgument("pretraining corpus is empty".into()));
    }
    let mut seen_classes: Vec<usize> = denoise_corpus.examples.iter().map(|e| e.class).collect();
    seen_classes.sort_unstable();
    seen_classes.dedup();
    if seen_classes.len() < 2 {
        return Err(Error::InvalidArgument(
            "pretraining corpus must cover at least two classes".into(),
        ));
    }

    let mut model = LdmParams::new(&cfg.dims, &ae_corpus.domain_names, &ae_corpus.class_names, rng)?;
    let batch_size = cfg.pretrain_batch.max(1);
    let mut order: Vec<usize> = (0..ae_corpus.examples.len()).collect();

    // Stage one: autoencoder on pixel reconstruction.
    let mut ae_losses = Vec::with_capacity(cfg.ae_epochs);
    let mut opt = Optimizer::adam(cfg.pretrain_lr);
    for epoch in 0..cfg.ae_epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            for &i in chunk {
                let x = ae_corpus.examples[i].image.pixels();
                let (z, ecache) = model.encoder.forward(x);
                let (y, dcache) = model.decoder.forward(&z);
                let n = y.len() as f64;
                let diff = &y - x;
                epoch_loss += diff.mapv(|v| v * v).sum() / n;
                let g_y = diff.mapv(|v| 2.0 * v / (n * chunk.len() as f64));
                let g_z = model.decoder.backward(&dcache, &g_y);
                model.encoder.backward(&ecache, &g_z);
            }
            let mut params = model.encoder.params();
            params.extend(model.decoder.params());
            opt.step(&mut params);
        }
        let mean = epoch_loss / ae_corpus.examples.len() as f64;
        check_finite("autoencoder", epoch, mean)?;
        ae_losses.push(mean);
    }

    // Standardize the latent space before diffusion: nothing constrains
    // the autoencoder's output scale, and the schedule mixes with N(0, 1).
    let images: Vec<&crate::types::Image> =
        ae_corpus.examples.iter().map(|e| &e.image).collect();
    model.fit_latent_norm(&images)?;

    // Stage two: freeze the encoder, train denoiser + conditioner.
    let mut order: Vec<usize> = (0..denoise_corpus.examples.len()).collect();
    let latents: Vec<LatentTensor> = denoise_corpus
        .examples
        .iter()
        .map(|e| model.encode(&e.image))
        .collect::<Result<_>>()?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let t_max = model.schedule.t_max();
    let mut denoise_losses = Vec::with_capacity(cfg.denoiser_epochs);
    let mut opt = Optimizer::adam(cfg.pretrain_lr);
    for epoch in 0..cfg.denoiser_epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            for &i in chunk {
                let e = &denoise_corpus.examples[i];
                let ex = LossExample {
                    z0: &latents[i],
                    style: SlotValue::Vocab(model.vocab.domain_token(e.domain)?),
                    class: SlotValue::Vocab(model.vocab.class_token(e.class)?),
                };
                let t = rng.random_range(1..=t_max);
                let (h, w, c) = latents[i].shape();
                let eps = Array3::from_shape_fn((h, w, c), |_| normal.sample(rng));
                let (loss, _) = ldm_loss_fixed_grad(
                    &mut model.denoiser,
                    &mut model.conditioner,
                    &model.template,
                    &model.schedule,
                    &ex,
                    t,
                    &eps,
                    1.0 / chunk.len() as f64,
                )?;
                epoch_loss += loss;
            }
            let mut params = model.denoiser.params();
            params.extend(model.conditioner.params());
            opt.step(&mut params);
        }
        let mean = epoch_loss / denoise_corpus.examples.len() as f64;
        check_finite("denoiser", epoch, mean)?;
        denoise_losses.push(mean);
    }

    Ok((model, PretrainReport { ae_losses, denoise_losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{SyntheticBenchmarkSpec, generate_benchmark};
    use crate::config::ModelDims;
    use crate::rng::{RngScope, derive_rng};

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
            ae_epochs: 6,
            denoiser_epochs: 6,
            pretrain_batch: 8,
            ..RunConfig::default()
        }
    }

    fn small_corpus(per_cell: usize) -> GroupedDataset {
        let spec = SyntheticBenchmarkSpec { classes: 3, domains: 2, per_cell, image_size: 16 };
        let mut rng = derive_rng(30, RngScope::Partition, 0);
        generate_benchmark(&spec, &mut rng).unwrap()
    }

    #[test]
    fn losses_decrease_over_training() {
        let corpus = small_corpus(6);
        let cfg = small_cfg();
        let mut rng = derive_rng(31, RngScope::Train, 0);
        let (_, report) = pretrain(&corpus, &corpus, &cfg, &mut rng).unwrap();
        assert_eq!(report.ae_losses.len(), cfg.ae_epochs);
        assert_eq!(report.denoise_losses.len(), cfg.denoiser_epochs);
        assert!(
            report.ae_losses.last().unwrap() < report.ae_losses.first().unwrap(),
            "AE loss did not decrease: {:?}",
            report.ae_losses
        );
        assert!(
            report.denoise_losses.last().unwrap() < report.denoise_losses.first().unwrap(),
            "denoising loss did not decrease: {:?}",
            report.denoise_losses
        );
    }

    #[test]
    fn rejects_single_class_corpus() {
        let mut corpus = small_corpus(4);
        corpus.examples.retain(|e| e.class == 0);
        let cfg = small_cfg();
        let mut rng = derive_rng(32, RngScope::Train, 0);
        assert!(pretrain(&corpus, &corpus, &cfg, &mut rng).is_err());
    }

    #[test]
    fn same_seed_reproduces_weights() {
        let corpus = small_corpus(2);
        let mut cfg = small_cfg();
        cfg.ae_epochs = 2;
        cfg.denoiser_epochs = 2;
        let mut r1 = derive_rng(33, RngScope::Train, 0);
        let mut r2 = derive_rng(33, RngScope::Train, 0);
        let (m1, _) = pretrain(&corpus, &corpus, &cfg, &mut r1).unwrap();
        let (m2, _) = pretrain(&corpus, &corpus, &cfg, &mut r2).unwrap();
        assert_eq!(m1.checksum(), m2.checksum());
    }
}
