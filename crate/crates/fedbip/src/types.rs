//! Domain value types shared by every module.
//!
//! All types are immutable value objects after construction. Tensors are
//! held as `f64` arrays internally; anything that crosses a serialization
//! boundary is quantized to `f32` first so round-trips are bit-exact.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// An H x W x 3 image with entries in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.shape()[2] != 3 {
            return Err(Error::ShapeMismatch {
                expected: "(H, W, 3)".into(),
                actual: format!("{:?}", pixels.shape()),
            });
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "image entries must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Image { pixels })
    }

    /// Clamps entries into [0, 1] before constructing; used by decoders.
    pub fn from_unclamped(mut pixels: Array3<f64>) -> Result<Self> {
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Image::new(pixels)
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.mean().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub image: Image,
    pub label: usize,
}

/// One client's private dataset.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: u64,
    pub examples: Vec<LabeledExample>,
    /// Present for feature-heterogeneity (domain) partitions.
    pub domain_id: Option<usize>,
}

impl ClientDataset {
    pub fn new(
        client_id: u64,
        examples: Vec<LabeledExample>,
        domain_id: Option<usize>,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "client {client_id} dataset must be non-empty"
            )));
        }
        let (h, w) = (examples[0].image.height(), examples[0].image.width());
        if !examples.iter().all(|e| e.image.height() == h && e.image.width() == w) {
            return Err(Error::InvalidArgument("all images must share one shape".into()));
        }
        Ok(ClientDataset { client_id, examples, domain_id })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Latent working representation z(t), shape (h, w, c).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    values: Array3<f64>,
}

impl LatentTensor {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("latent entries must be finite".into()));
        }
        Ok(LatentTensor { values })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }

    /// Rounds every entry through f32, the wire precision.
    pub fn quantized(&self) -> LatentTensor {
        LatentTensor { values: self.values.mapv(|v| v as f32 as f64) }
    }
}

/// Learned domain vector S (n_s x d_w) and per-category vectors
/// V (C x n_v x d_w); the only client-trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVectors {
    pub s: Array2<f64>,
    pub v: Array3<f64>,
    /// Per-class flag: false when the client had no data for the class and
    /// the row is still at its random initialization.
    pub optimized: Vec<bool>,
}

impl ConceptVectors {
    pub fn new(s: Array2<f64>, v: Array3<f64>, optimized: Vec<bool>) -> Result<Self> {
        if s.shape()[0] < 1 || v.shape()[1] < 1 {
            return Err(Error::InvalidArgument("n_s and n_v must be >= 1".into()));
        }
        if s.shape()[1] != v.shape()[2] {
            return Err(Error::ShapeMismatch {
                expected: format!("V token width {}", s.shape()[1]),
                actual: format!("{}", v.shape()[2]),
            });
        }
        if optimized.len() != v.shape()[0] {
            return Err(Error::InvalidArgument("optimized flags must cover all classes".into()));
        }
        if !s.iter().all(|x| x.is_finite()) || !v.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument("concept entries must be finite".into()));
        }
        Ok(ConceptVectors { s, v, optimized })
    }

    pub fn num_classes(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn token_width(&self) -> usize {
        self.s.shape()[1]
    }

    pub fn quantized(&self) -> ConceptVectors {
        ConceptVectors {
            s: self.s.mapv(|v| v as f32 as f64),
            v: self.v.mapv(|v| v as f32 as f64),
            optimized: self.optimized.clone(),
        }
    }
}

/// The entire client-to-server traffic: one message per client per run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub client_id: u64,
    /// (z_i(T), y_i) pairs, length N^k.
    pub latents: Vec<(LatentTensor, usize)>,
    pub concepts: ConceptVectors,
    /// Domain id the client was assigned, when known.
    pub domain_id: Option<usize>,
    pub seed_provenance: String,
}

impl ClientUpload {
    pub fn new(
        client_id: u64,
        latents: Vec<(LatentTensor, usize)>,
        concepts: ConceptVectors,
        domain_id: Option<usize>,
        seed_provenance: String,
    ) -> Result<Self> {
        if latents.is_empty() {
            return Err(Error::InvalidArgument("upload must contain at least one latent".into()));
        }
        let shape = latents[0].0.shape();
        let num_classes = concepts.num_classes();
        for (z, y) in &latents {
            if z.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: format!("{shape:?}"),
                    actual: format!("{:?}", z.shape()),
                });
            }
            if *y >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "label {y} out of range for C={num_classes}"
                )));
            }
        }
        // Everything in an upload is wire-precision by construction.
        let latents = latents.into_iter().map(|(z, y)| (z.quantized(), y)).collect();
        Ok(ClientUpload {
            client_id,
            latents,
            concepts: concepts.quantized(),
            domain_id,
            seed_provenance,
        })
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.latents[0].0.shape()
    }

    /// Payload size in bytes at wire precision (f32).
    pub fn payload_bytes(&self) -> usize {
        let (h, w, c) = self.latent_shape();
        let latents = self.latents.len() * h * w * c * 4;
        let concepts = (self.concepts.s.len() + self.concepts.v.len()) * 4;
        latents + concepts + self.latents.len() * 8
    }
}

/// Monotone cumulative noise-schedule coefficients for t = 0..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Config("schedule needs at least t = 0 and t = 1".into()));
        }
        if (alpha_bar[0] - 1.0).abs() > 1e-12 {
            return Err(Error::Config("alpha_bar[0] must be 1".into()));
        }
        if !alpha_bar.windows(2).all(|w| w[1] <= w[0]) {
            return Err(Error::Config("alpha_bar must be non-increasing".into()));
        }
        let last = *alpha_bar.last().unwrap();
        if !(0.0..=1e-3).contains(&last) {
            return Err(Error::Config(format!(
                "alpha_bar[T] must be in [0, 1e-3] so z(T) is noise-dominated, got {last}"
            )));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    /// Linear interpolation from 1.0 at t=0 down to `final_alpha_bar` at t=T.
    pub fn linear(t_max: usize, final_alpha_bar: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::Config("T must be >= 1".into()));
        }
        // The t = T point is pinned exactly: the interpolation can land
        // a few ulps above `final_alpha_bar` and trip the terminal check.
        let ab = (0..=t_max)
            .map(|t| {
                if t == t_max {
                    final_alpha_bar
                } else {
                    1.0 + (final_alpha_bar - 1.0) * t as f64 / t_max as f64
                }
            })
            .collect();
        NoiseSchedule::new(ab)
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("t={t} out of range 0..={}", self.t_max())))
    }
}
