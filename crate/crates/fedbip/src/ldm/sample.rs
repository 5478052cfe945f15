//! Deterministic and stochastic DDIM sampling from a terminal latent.
//!
//! With eta = 0 the reverse trajectory is a deterministic function of the
//! starting latent and the conditioning vector; eta > 0 mixes in fresh
//! noise at every step, which is how repeated generation passes over the
//! same uploads produce distinct samples.

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::types::{LatentTensor, NoiseSchedule};

use super::denoiser::Denoiser;

/// Anything that predicts the noise component of z(t); the sampler is
/// generic over this so tests can substitute closed-form oracles.
pub trait NoisePredictor {
    fn predict(&self, z: &Array3<f64>, u: f64, cond: &Array1<f64>) -> Array3<f64>;
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z: &Array3<f64>, u: f64, cond: &Array1<f64>) -> Array3<f64> {
        self.forward(z, u, cond).0
    }
}

/// Static threshold on the predicted clean latent. Near t = T the update
/// divides by sqrt(alpha_bar_T) ~ 0.03, so imperfect noise predictions
/// blow z0_hat up by a factor of ~30 and the decoder saturates; clamping
/// the prediction to a generous range keeps the reverse trajectory on the
/// data scale without touching in-range values.
pub const Z0_CLIP: f64 = 4.0;

/// Runs `steps` DDIM updates from `z_start` (taken to be z(T)) down to
/// t = 0 under the fixed conditioning vector. `rng` is only consulted
/// when `eta > 0`.
pub fn sample(
    denoiser: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    z_start: &LatentTensor,
    cond: &Array1<f64>,
    steps: usize,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<LatentTensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    if eta < 0.0 {
        return Err(Error::InvalidArgument("eta must be >= 0".into()));
    }
    let t_max = schedule.t_max();
    // Descending timestep grid from T to 0 with `steps` transitions.
    let grid: Vec<usize> = (0..=steps)
        .map(|i| ((t_max * (steps - i)) as f64 / steps as f64).round() as usize)
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let (h, w, c) = z_start.shape();
    let mut z = z_start.values().clone();
    for pair in grid.windows(2) {
        let (t_cur, t_next) = (pair[0], pair[1]);
        if t_cur == t_next {
            continue;
        }
        let ab_cur = schedule.alpha_bar(t_cur)?;
        let ab_next = schedule.alpha_bar(t_next)?;
        let u = t_cur as f64 / t_max as f64;
        let eps_hat = denoiser.predict(&z, u, cond);
        let z0_hat = ((&z - &(&eps_hat * (1.0 - ab_cur).sqrt())) / ab_cur.sqrt())
            .mapv(|v| v.clamp(-Z0_CLIP, Z0_CLIP));
        let sigma = if eta > 0.0 && ab_next < 1.0 {
            eta * ((1.0 - ab_next) / (1.0 - ab_cur)).sqrt() * (1.0 - ab_cur / ab_next).sqrt()
        } else {
            0.0
        };
        let dir_coeff = (1.0 - ab_next - sigma * sigma).max(0.0).sqrt();
        z = &z0_hat * ab_next.sqrt() + &eps_hat * dir_coeff;
        if sigma > 0.0 {
            let noise = Array3::from_shape_fn((h, w, c), |_| normal.sample(rng));
            z += &(&noise * sigma);
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!(
                "sampler produced non-finite values at t={t_cur}"
            )));
        }
    }
    LatentTensor::new(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelDims;
    use crate::ldm::{FINAL_ALPHA_BAR, forward_diffuse};
    use crate::rng::{RngScope, derive_rng};
    use rand::RngExt;

    fn setup() -> (Denoiser, NoiseSchedule, Array1<f64>) {
        let dims = ModelDims {
            latent_h: 4,
            latent_w: 4,
            latent_c: 2,
            hidden: 6,
            d_cond: 5,
            ..ModelDims::default()
        };
        let mut rng = derive_rng(20, RngScope::Sampler, 0);
        let den = Denoiser::new(&dims, &mut rng);
        let schedule = NoiseSchedule::linear(100, FINAL_ALPHA_BAR).unwrap();
        let cond = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        (den, schedule, cond)
    }

    fn random_latent(rng: &mut impl Rng) -> LatentTensor {
        LatentTensor::new(Array3::from_shape_fn((4, 4, 2), |_| rng.random_range(-1.0..1.0)))
            .unwrap()
    }

    #[test]
    fn deterministic_at_eta_zero() {
        let (den, schedule, cond) = setup();
        let mut rng = derive_rng(21, RngScope::Sampler, 0);
        let z = random_latent(&mut rng);
        let a = sample(&den, &schedule, &z, &cond, 25, 0.0, &mut rng).unwrap();
        let b = sample(&den, &schedule, &z, &cond, 25, 0.0, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stochastic_passes_differ() {
        let (den, schedule, cond) = setup();
        let mut rng = derive_rng(22, RngScope::Sampler, 0);
        let z = random_latent(&mut rng);
        let a = sample(&den, &schedule, &z, &cond, 25, 0.5, &mut rng).unwrap();
        let b = sample(&den, &schedule, &z, &cond, 25, 0.5, &mut rng).unwrap();
        assert_ne!(a, b);
    }

    /// With a one-step grid [T, 0] and an oracle denoiser that returns the
    /// exact noise used to corrupt z0, the DDIM update inverts the forward
    /// diffusion in closed form and recovers z0.
    #[test]
    fn one_step_with_oracle_noise_recovers_z0() {
        struct Oracle(Array3<f64>);
        impl NoisePredictor for Oracle {
            fn predict(&self, _: &Array3<f64>, _: f64, _: &Array1<f64>) -> Array3<f64> {
                self.0.clone()
            }
        }
        let (_, schedule, cond) = setup();
        let mut rng = derive_rng(23, RngScope::Sampler, 0);
        let z0 = random_latent(&mut rng);
        let eps = Array3::from_shape_fn((4, 4, 2), |_| rng.random_range(-1.0..1.0));
        let t_max = schedule.t_max();
        let zt = forward_diffuse(&z0, t_max, &eps, &schedule).unwrap();
        let out = sample(&Oracle(eps), &schedule, &zt, &cond, 1, 0.0, &mut rng).unwrap();
        let max_dev = (out.values() - z0.values())
            .mapv(f64::abs)
            .fold(0.0, |a: f64, &b| a.max(b));
        assert!(max_dev < 1e-9, "oracle inversion deviates by {max_dev}");
    }

    #[test]
    fn step_grid_sensitivity_is_bounded() {
        // Different step counts should yield finite, comparable outputs
        // (no divergence in the reverse pass).
        let (den, schedule, cond) = setup();
        let mut rng = derive_rng(24, RngScope::Sampler, 0);
        let z = random_latent(&mut rng);
        for steps in [1, 5, 25, 50, 100] {
            let out = sample(&den, &schedule, &z, &cond, steps, 0.0, &mut rng).unwrap();
            assert!(out.values().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_predictor_output_stays_on_the_data_scale() {
        // An uninformative predictor would otherwise amplify the start
        // latent by 1/sqrt(alpha_bar_T) ~ 30x; the z0 threshold caps it.
        struct Zero;
        impl NoisePredictor for Zero {
            fn predict(&self, _: &Array3<f64>, _: f64, _: &Array1<f64>) -> Array3<f64> {
                Array3::zeros((4, 4, 2))
            }
        }
        let (_, schedule, cond) = setup();
        let mut rng = derive_rng(26, RngScope::Sampler, 0);
        let z = random_latent(&mut rng);
        let out = sample(&Zero, &schedule, &z, &cond, 25, 0.0, &mut rng).unwrap();
        let max_abs = out.values().mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(max_abs <= Z0_CLIP + 1e-12, "unclamped output reached {max_abs}");
    }

    #[test]
    fn rejects_zero_steps() {
        let (den, schedule, cond) = setup();
        let mut rng = derive_rng(25, RngScope::Sampler, 0);
        let z = random_latent(&mut rng);
        assert!(sample(&den, &schedule, &z, &cond, 0, 0.0, &mut rng).is_err());
    }
}
