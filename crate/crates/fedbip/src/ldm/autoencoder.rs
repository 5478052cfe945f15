//! Convolutional autoencoder mapping images to the latent working space.
//!
//! The encoder downsamples by 4x with two strided convolutions; the
//! decoder mirrors it with nearest-neighbor upsampling and a linear
//! output head; decoded pixels are clamped to [0, 1] at image
//! construction, outside the training path.

use ndarray::Array3;
use rand::Rng;

use crate::config::ModelDims;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Param, relu, relu_backward, upsample2, upsample2_backward};
use crate::types::{Image, LatentTensor};

const AE_HIDDEN: usize = 8;

#[derive(Debug, Clone)]
pub struct Encoder {
    pub c1: Conv2d, // 3 -> 8, stride 2
    pub c2: Conv2d, // 8 -> 8, stride 1
    pub c3: Conv2d, // 8 -> latent_c, stride 2
}

pub struct EncoderCache {
    x: Array3<f64>,
    a1: Array3<f64>,
    h1: Array3<f64>,
    a2: Array3<f64>,
    h2: Array3<f64>,
}

impl Encoder {
    pub fn new(dims: &ModelDims, rng: &mut impl Rng) -> Result<Self> {
        if dims.latent_h * 4 != dims.image_size || dims.latent_w * 4 != dims.image_size {
            return Err(Error::Config(format!(
                "latent grid {}x{} must be image_size/4 = {}",
                dims.latent_h,
                dims.latent_w,
                dims.image_size / 4
            )));
        }
        Ok(Encoder {
            c1: Conv2d::new(3, 3, AE_HIDDEN, 2, 1, rng),
            c2: Conv2d::new(3, AE_HIDDEN, AE_HIDDEN, 1, 1, rng),
            c3: Conv2d::new(3, AE_HIDDEN, dims.latent_c, 2, 1, rng),
        })
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, EncoderCache) {
        let a1 = self.c1.forward(x);
        let h1 = relu(&a1);
        let a2 = self.c2.forward(&h1);
        let h2 = relu(&a2);
        let z = self.c3.forward(&h2);
        (z, EncoderCache { x: x.clone(), a1, h1, a2, h2 })
    }

    pub fn backward(&mut self, cache: &EncoderCache, g_z: &Array3<f64>) -> Array3<f64> {
        let g_h2 = self.c3.backward(&cache.h2, g_z);
        let g_a2 = relu_backward(&cache.a2, &g_h2);
        let g_h1 = self.c2.backward(&cache.h1, &g_a2);
        let g_a1 = relu_backward(&cache.a1, &g_h1);
        self.c1.backward(&cache.x, &g_a1)
    }

    /// Pure inference path: image in, latent out.
    pub fn encode(&self, image: &Image) -> Result<LatentTensor> {
        let (z, _) = self.forward(image.pixels());
        LatentTensor::new(z)
    }

    pub fn params(&mut self) -> Vec<&mut Param> {
        let mut p = self.c1.params();
        p.extend(self.c2.params());
        p.extend(self.c3.params());
        p
    }

    pub fn params_ref(&self) -> Vec<&Param> {
        vec![&self.c1.w, &self.c1.b, &self.c2.w, &self.c2.b, &self.c3.w, &self.c3.b]
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub c1: Conv2d, // latent_c -> 8
    pub c2: Conv2d, // 8 -> 8
    pub c3: Conv2d, // 8 -> 3
}

pub struct DecoderCache {
    z: Array3<f64>,
    a1: Array3<f64>,
    u1: Array3<f64>,
    a2: Array3<f64>,
    u2: Array3<f64>,
}

impl Decoder {
    pub fn new(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        Decoder {
            c1: Conv2d::new(3, dims.latent_c, AE_HIDDEN, 1, 1, rng),
            c2: Conv2d::new(3, AE_HIDDEN, AE_HIDDEN, 1, 1, rng),
            c3: Conv2d::new(3, AE_HIDDEN, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, z: &Array3<f64>) -> (Array3<f64>, DecoderCache) {
        let a1 = self.c1.forward(z);
        let u1 = upsample2(&relu(&a1));
        let a2 = self.c2.forward(&u1);
        let u2 = upsample2(&relu(&a2));
        // Linear output head: the image clamp happens at construction
        // time, never inside the training path, so gradients cannot die
        // in a saturated output nonlinearity.
        let y = self.c3.forward(&u2);
        (y, DecoderCache { z: z.clone(), a1, u1, a2, u2 })
    }

    pub fn backward(&mut self, cache: &DecoderCache, g_y: &Array3<f64>) -> Array3<f64> {
        let g_u2 = self.c3.backward(&cache.u2, g_y);
        let g_r2 = upsample2_backward(&g_u2);
        let g_a2 = relu_backward(&cache.a2, &g_r2);
        let g_u1 = self.c2.backward(&cache.u1, &g_a2);
        let g_r1 = upsample2_backward(&g_u1);
        let g_a1 = relu_backward(&cache.a1, &g_r1);
        self.c1.backward(&cache.z, &g_a1)
    }

    /// Pure inference path: latent in, clamped image out.
    pub fn decode(&self, z: &LatentTensor) -> Result<Image> {
        let (y, _) = self.forward(z.values());
        Image::from_unclamped(y)
    }

    pub fn params(&mut self) -> Vec<&mut Param> {
        let mut p = self.c1.params();
        p.extend(self.c2.params());
        p.extend(self.c3.params());
        p
    }

    pub fn params_ref(&self) -> Vec<&Param> {
        vec![&self.c1.w, &self.c1.b, &self.c2.w, &self.c2.b, &self.c3.w, &self.c3.b]
    }
}
