//! The toy latent diffusion model: autoencoder, prompt conditioner,
//! noise predictor, schedule operations, pretraining, and DDIM sampling.
//!
//! The denoising objective is the usual noise-matching loss
//! L = E_{z0, t, eps} || eps - eps_hat(z(t), t, tau(prompt)) ||^2 with
//! z(t) = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps. Losses are
//! summed over latent dimensions and averaged over the batch.

pub mod autoencoder;
pub mod conditioner;
pub mod denoiser;
pub mod pretrain;
pub mod sample;

pub use autoencoder::{Decoder, Encoder};
pub use conditioner::{Conditioner, PromptTemplate, SlotGrads, SlotValue, Vocabulary};
pub use denoiser::Denoiser;
pub use pretrain::{PretrainReport, pretrain};
pub use sample::sample;

use ndarray::{Array1, Array2, Array3, ArrayD};
use rand::{Rng, RngExt};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::config::ModelDims;
use crate::container;
use crate::error::{Error, Result};
use crate::nn::{Param, checksum_params};
use crate::types::{Image, LatentTensor, NoiseSchedule};

/// Terminal cumulative schedule value: alpha_bar decays linearly from 1
/// at t=0 to this at t=T, so z(T) is noise-dominated.
pub const FINAL_ALPHA_BAR: f64 = 1e-3;

/// z(t) = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
pub fn forward_diffuse(
    z0: &LatentTensor,
    t: usize,
    eps: &Array3<f64>,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    let ab = schedule.alpha_bar(t)?;
    let (h, w, c) = z0.shape();
    if eps.shape() != [h, w, c] {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", (h, w, c)),
            actual: format!("{:?}", eps.shape()),
        });
    }
    LatentTensor::new(z0.values() * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// The complete generative model plus its fixed vocabulary and schedule.
#[derive(Debug, Clone)]
pub struct LdmParams {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub denoiser: Denoiser,
    pub conditioner: Conditioner,
    pub template: PromptTemplate,
    pub vocab: Vocabulary,
    pub schedule: NoiseSchedule,
    pub dims: ModelDims,
    /// Affine latent standardization fitted after autoencoder training,
    /// so that diffusion mixes the data with noise on a comparable scale.
    pub latent_shift: f64,
    pub latent_scale: f64,
}

impl LdmParams {
    pub fn new(
        dims: &ModelDims,
        domain_names: &[String],
        class_names: &[String],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let vocab = Vocabulary::new(domain_names, class_names);
        let template = PromptTemplate::new(&vocab)?;
        Ok(LdmParams {
            encoder: Encoder::new(dims, rng)?,
            decoder: Decoder::new(dims, rng),
            denoiser: Denoiser::new(dims, rng),
            conditioner: Conditioner::new(vocab.len(), dims, rng),
            template,
            vocab,
            schedule: NoiseSchedule::linear(dims.t_max, FINAL_ALPHA_BAR)?,
            dims: dims.clone(),
            latent_shift: 0.0,
            latent_scale: 1.0,
        })
    }

    /// Fits the latent standardization on a set of images so encoded
    /// latents come out with zero mean and unit scale.
    pub fn fit_latent_norm(&mut self, images: &[&Image]) -> Result<()> {
        let mut vals = Vec::new();
        for img in images {
            vals.extend(self.encoder.encode(img)?.values().iter().copied());
        }
        if vals.is_empty() {
            return Err(Error::InvalidArgument("latent normalization needs images".into()));
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        self.latent_shift = mean;
        self.latent_scale = var.sqrt().max(1e-6);
        Ok(())
    }

    pub fn encode(&self, image: &Image) -> Result<LatentTensor> {
        let z = self.encoder.encode(image)?;
        LatentTensor::new((z.values() - self.latent_shift) / self.latent_scale)
    }

    pub fn decode(&self, z: &LatentTensor) -> Result<Image> {
        let raw = LatentTensor::new(z.values() * self.latent_scale + self.latent_shift)?;
        self.decoder.decode(&raw)
    }

    /// Encodes a filled prompt template into the conditioning vector.
    pub fn condition(&self, style: &SlotValue, class: &SlotValue) -> Result<Array1<f64>> {
        Ok(self.conditioner.forward(&self.template, style, class)?.0)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names().len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.vocab
            .tokens()
            .iter()
            .filter_map(|t| t.strip_prefix("cls:").map(str::to_string))
            .collect()
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.vocab
            .tokens()
            .iter()
            .filter_map(|t| t.strip_prefix("dom:").map(str::to_string))
            .collect()
    }

    fn named_params(&self) -> Vec<(String, ArrayD<f64>)> {
        self.params_ref()
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("p{i:03}"), p.value.clone()))
            .collect()
    }

    pub fn params_ref(&self) -> Vec<&Param> {
        let mut p = self.encoder.params_ref();
        p.extend(self.decoder.params_ref());
        p.extend(self.denoiser.params_ref());
        p.extend(self.conditioner.params_ref());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.denoiser.params());
        p.extend(self.conditioner.params());
        p
    }

    /// SHA-256 over all weights; used to verify the backbone stays frozen
    /// through client-side concept optimization.
    pub fn checksum(&self) -> [u8; 32] {
        checksum_params(&self.params_ref())
    }

    /// Writes the checkpoint container: weights blob plus a JSON sidecar
    /// with dimensions, vocabulary and schedule.
    pub fn save(&self, dir: &Path) -> Result<()> {
        container::write_tensors(dir, &self.named_params())?;
        let meta = LdmMeta {
            dims: self.dims.clone(),
            vocab: self.vocab.clone(),
            alpha_bar: (0..=self.schedule.t_max())
                .map(|t| self.schedule.alpha_bar(t).unwrap())
                .collect(),
            latent_shift: self.latent_shift,
            latent_scale: self.latent_scale,
        };
        std::fs::write(dir.join("ldm.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: LdmMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("ldm.json"))?)?;
        let mut rng = crate::rng::derive_rng(0, crate::rng::RngScope::ConceptInit, 0);
        let mut model = LdmParams::new(
            &meta.dims,
            &meta.vocab
                .tokens()
                .iter()
                .filter_map(|t| t.strip_prefix("dom:").map(str::to_string))
                .collect::<Vec<_>>(),
            &meta.vocab
                .tokens()
                .iter()
                .filter_map(|t| t.strip_prefix("cls:").map(str::to_string))
                .collect::<Vec<_>>(),
            &mut rng,
        )?;
        model.schedule = NoiseSchedule::new(meta.alpha_bar)?;
        model.latent_shift = meta.latent_shift;
        model.latent_scale = meta.latent_scale;
        let tensors = container::read_tensors(dir)?;
        let mut params = model.params_mut();
        if tensors.len() != params.len() {
            return Err(Error::CorruptUpload(format!(
                "checkpoint holds {} tensors, model has {}",
                tensors.len(),
                params.len()
            )));
        }
        for (p, (name, t)) in params.iter_mut().zip(&tensors) {
            if p.value.shape() != t.shape() {
                return Err(Error::CorruptUpload(format!(
                    "tensor {name} shape {:?} does not match model {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value.assign(t);
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct LdmMeta {
    dims: ModelDims,
    vocab: Vocabulary,
    alpha_bar: Vec<f64>,
    latent_shift: f64,
    latent_scale: f64,
}

/// One training example for the denoising loss: a clean latent and the
/// slot contents of its prompt.
pub struct LossExample<'a> {
    pub z0: &'a LatentTensor,
    pub style: SlotValue<'a>,
    pub class: SlotValue<'a>,
}

/// Denoising loss at fixed (t, eps): sum over latent dims of
/// ||eps - eps_hat||^2. No averaging; callers divide by the batch size.
pub fn ldm_loss_fixed(
    model: &LdmParams,
    ex: &LossExample,
    t: usize,
    eps: &Array3<f64>,
) -> Result<f64> {
    let zt = forward_diffuse(ex.z0, t, eps, &model.schedule)?;
    let cond = model.condition(&ex.style, &ex.class)?;
    let u = t as f64 / model.schedule.t_max() as f64;
    let (eps_hat, _) = model.denoiser.forward(zt.values(), u, &cond);
    Ok((eps - &eps_hat).mapv(|v| v * v).sum())
}

/// Gradient accumulation for one example at fixed (t, eps). Adds
/// `scale * dL/dtheta` into the denoiser/conditioner parameter grads and
/// returns (loss, grads of the free concept slots).
pub fn ldm_loss_fixed_grad(
    denoiser: &mut Denoiser,
    conditioner: &mut Conditioner,
    template: &PromptTemplate,
    schedule: &NoiseSchedule,
    ex: &LossExample,
    t: usize,
    eps: &Array3<f64>,
    scale: f64,
) -> Result<(f64, SlotGrads)> {
    let zt = forward_diffuse(ex.z0, t, eps, schedule)?;
    let (cond, ccache) = conditioner.forward(template, &ex.style, &ex.class)?;
    let u = t as f64 / schedule.t_max() as f64;
    let (eps_hat, dcache) = denoiser.forward(zt.values(), u, &cond);
    let diff = eps - &eps_hat;
    let loss = diff.mapv(|v| v * v).sum();
    // dL/d eps_hat = -2 (eps - eps_hat), scaled for batch averaging.
    let g_out = diff.mapv(|v| -2.0 * v * scale);
    let (_, g_cond) = denoiser.backward(&dcache, &g_out);
    let grads = conditioner.backward(&ccache, &g_cond);
    Ok((loss, grads))
}

/// Monte-Carlo denoising loss over a batch: t ~ U{1..T} and eps ~ N(0, I)
/// per example, mean over the batch of the dim-summed squared error.
pub fn ldm_loss(model: &LdmParams, batch: &[LossExample], rng: &mut impl Rng) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("loss batch must be non-empty".into()));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let t_max = model.schedule.t_max();
    let mut total = 0.0;
    for ex in batch {
        let t = rng.random_range(1..=t_max);
        let (h, w, c) = ex.z0.shape();
        let eps = Array3::from_shape_fn((h, w, c), |_| normal.sample(rng));
        total += ldm_loss_fixed(model, ex, t, &eps)?;
    }
    Ok(total / batch.len() as f64)
}

/// Draws a standard-normal latent of the model's latent shape.
pub fn standard_normal_latent(dims: &ModelDims, rng: &mut impl Rng) -> LatentTensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    LatentTensor::new(Array3::from_shape_fn(
        (dims.latent_h, dims.latent_w, dims.latent_c),
        |_| normal.sample(rng),
    ))
    .expect("normal draws are finite")
}

/// Freshly initialized concept rows, the state uploaded for classes a
/// client never saw.
pub fn init_concept_rows(n: usize, d_w: usize, rng: &mut impl Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, 0.02).expect("init std");
    Array2::from_shape_fn((n, d_w), |_| normal.sample(rng))
}
