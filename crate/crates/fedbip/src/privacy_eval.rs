//! Quantitative privacy suite: membership-inference gaps, latent
//! Gaussianity statistics, nearest-neighbor retrieval between synthetic
//! and real images, and the gamma interpolation sweep.
//!
//! All functions are pure analyses over trained models and fixed data.
//! The feature space for retrieval is the served classifier's penultimate
//! layer; reports record that substitution explicitly.

use ndarray::Array1;
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::classifier::{Classifier, cross_entropy, softmax};
use crate::error::{Error, Result};
use crate::ldm::{LdmParams, forward_diffuse, sample};
use crate::rng::{RngScope, derive_rng_sub};
use crate::types::{Image, LabeledExample, LatentTensor};
use rand_distr::Distribution;

/// Recorded in every report that uses the feature space.
pub const FEATURE_EXTRACTOR: &str = "served classifier penultimate layer (global average pool)";

/// Membership-inference gap: set-mean differences of per-example loss and
/// prediction entropy, non-members minus members. Entropy and loss are in
/// nats.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MiaReport {
    pub member_loss: f64,
    pub non_member_loss: f64,
    pub loss_gap: f64,
    pub member_entropy: f64,
    pub non_member_entropy: f64,
    pub entropy_gap: f64,
    pub feature_extractor: String,
}

fn prediction_entropy(clf: &Classifier, img: &Image) -> f64 {
    let p = softmax(&clf.logits(img.pixels()));
    -p.iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).sum::<f64>()
}

fn set_means(clf: &Classifier, set: &[LabeledExample]) -> (f64, f64) {
    let n = set.len() as f64;
    let loss = set.iter().map(|e| cross_entropy(&clf.logits(e.image.pixels()), e.label)).sum::<f64>() / n;
    let entropy = set.iter().map(|e| prediction_entropy(clf, &e.image)).sum::<f64>() / n;
    (loss, entropy)
}

pub fn mia_gap(
    clf: &Classifier,
    members: &[LabeledExample],
    non_members: &[LabeledExample],
) -> Result<MiaReport> {
    if members.is_empty() || non_members.is_empty() {
        return Err(Error::InvalidArgument("member and non-member sets must be non-empty".into()));
    }
    for m in members {
        if non_members.iter().any(|n| n.image == m.image) {
            return Err(Error::InvalidArgument(
                "member and non-member sets overlap; the gap would be meaningless".into(),
            ));
        }
    }
    let (member_loss, member_entropy) = set_means(clf, members);
    let (non_member_loss, non_member_entropy) = set_means(clf, non_members);
    Ok(MiaReport {
        member_loss,
        non_member_loss,
        loss_gap: non_member_loss - member_loss,
        member_entropy,
        non_member_entropy,
        entropy_gap: non_member_entropy - member_entropy,
        feature_extractor: FEATURE_EXTRACTOR.into(),
    })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    /// Raw kurtosis m4 / m2^2 (3 for a Gaussian).
    pub kurtosis: f64,
}

pub fn moments(samples: &[f64]) -> Moments {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let m = |k: i32| samples.iter().map(|&x| (x - mean).powi(k)).sum::<f64>() / n;
    let m2 = m(2);
    Moments {
        mean,
        variance: m2,
        skewness: if m2 > 0.0 { m(3) / m2.powf(1.5) } else { 0.0 },
        kurtosis: if m2 > 0.0 { m(4) / (m2 * m2) } else { 0.0 },
    }
}

/// One-sample Kolmogorov-Smirnov statistic against N(0, 1):
/// sup_x |ecdf(x) - Phi(x)| over the sample points.
pub fn ks_statistic_std_normal(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let phi = NormalDist::standard();
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = phi.cdf(x);
        d = d.max((((i + 1) as f64) / n - cdf).abs());
        d = d.max((cdf - (i as f64) / n).abs());
    }
    d
}

/// KS statistics and moment tables for the clean mixed latents z(0) and
/// the uploaded terminal latents z(T), both flattened to scalar entries.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GaussianityReport {
    pub ks_z0: f64,
    pub ks_zt: f64,
    pub moments_z0: Moments,
    pub moments_zt: Moments,
}

pub fn latent_gaussianity(z0_samples: &[f64], zt_samples: &[f64]) -> Result<GaussianityReport> {
    if z0_samples.is_empty() || zt_samples.is_empty() {
        return Err(Error::InvalidArgument("latent sample sets must be non-empty".into()));
    }
    Ok(GaussianityReport {
        ks_z0: ks_statistic_std_normal(z0_samples),
        ks_zt: ks_statistic_std_normal(zt_samples),
        moments_z0: moments(z0_samples),
        moments_zt: moments(zt_samples),
    })
}

/// One retrieval row: the top-k real indices for a synthetic image, with
/// cosine similarities in non-increasing order; ties go to the lower
/// real-image index.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RetrievalRow {
    pub synthetic_id: usize,
    pub matches: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RetrievalReport {
    pub rows: Vec<RetrievalRow>,
    pub mean_top1: f64,
    pub feature_extractor: String,
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

pub fn nn_retrieval(
    clf: &Classifier,
    synthetic: &[Image],
    real: &[Image],
    k: usize,
) -> Result<RetrievalReport> {
    if k == 0 || k > real.len() {
        return Err(Error::InvalidArgument(format!(
            "k={k} must be in 1..={} (the real set size)",
            real.len()
        )));
    }
    let real_feats: Vec<Array1<f64>> = real.iter().map(|x| clf.features(x.pixels())).collect();
    let mut rows = Vec::with_capacity(synthetic.len());
    let mut top1_acc = 0.0;
    for (si, s) in synthetic.iter().enumerate() {
        let f = clf.features(s.pixels());
        let mut sims: Vec<(usize, f64)> =
            real_feats.iter().enumerate().map(|(ri, rf)| (ri, cosine(&f, rf))).collect();
        // Descending similarity; equal similarities keep ascending index.
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite cosine").then(a.0.cmp(&b.0)));
        sims.truncate(k);
        top1_acc += sims[0].1;
        rows.push(RetrievalRow { synthetic_id: si, matches: sims });
    }
    let mean_top1 = if rows.is_empty() { 0.0 } else { top1_acc / rows.len() as f64 };
    Ok(RetrievalReport { rows, mean_top1, feature_extractor: FEATURE_EXTRACTOR.into() })
}

/// Runs the instance-level mix plus deterministic synthesis for each
/// gamma in the list, on one same-class image pair under a fixed
/// conditioning vector. Returns one image per gamma.
pub fn gamma_sweep(
    model: &LdmParams,
    x_a: &Image,
    x_b: &Image,
    cond: &Array1<f64>,
    gammas: &[f64],
    seed: u64,
    sample_steps: usize,
) -> Result<Vec<Image>> {
    let z_a = model.encode(x_a)?;
    let z_b = model.encode(x_b)?;
    let t_max = model.schedule.t_max();
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(gammas.len());
    for (gi, &gamma) in gammas.iter().enumerate() {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
        }
        let mixed = LatentTensor::new(z_a.values() * gamma + z_b.values() * (1.0 - gamma))?;
        // Same noise draw for every gamma: differences in the grid come
        // from the interpolation alone.
        let mut rng = derive_rng_sub(seed, RngScope::Noise, 0, &[gi as u64]);
        let (h, w, c) = mixed.shape();
        let eps = ndarray::Array3::from_shape_fn((h, w, c), |_| normal.sample(&mut rng));
        let zt = forward_diffuse(&mixed, t_max, &eps, &model.schedule)?;
        let z_out = sample(&model.denoiser, &model.schedule, &zt, cond, sample_steps, 0.0, &mut rng)?;
        out.push(model.decode(&z_out)?);
    }
    Ok(out)
}
