//! U-shaped noise predictor on the latent grid.
//!
//! The timestep embedding and the conditioning vector are each projected
//! to the hidden channel count and added as per-channel biases at the
//! bottleneck, which is where conditioning can steer every output pixel.
//! A skip connection carries the full-resolution features across the
//! bottleneck.

use ndarray::{Array1, Array3};
use rand::Rng;

use crate::config::ModelDims;
use crate::nn::{
    Conv2d, Dense, Param, avg_pool2, avg_pool2_backward, concat_channels, relu, relu_backward,
    split_channels, upsample2, upsample2_backward,
};

pub const T_EMB_DIM: usize = 8;

/// Sinusoidal features of the normalized timestep u = t / T.
pub fn t_embedding(u: f64) -> Array1<f64> {
    let mut e = Array1::zeros(T_EMB_DIM);
    for k in 0..T_EMB_DIM / 2 {
        let f = std::f64::consts::PI * (1 << k) as f64;
        e[2 * k] = (f * u).sin();
        e[2 * k + 1] = (f * u).cos();
    }
    e
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub conv_in: Conv2d,   // latent_c -> hidden
    pub conv_mid1: Conv2d, // hidden -> hidden (at half resolution)
    pub t_proj: Dense,     // T_EMB_DIM -> hidden
    pub cond_proj: Dense,  // d_cond -> hidden
    pub conv_mid2: Conv2d, // hidden -> hidden
    pub conv_up: Conv2d,   // 2*hidden -> hidden
    pub conv_out: Conv2d,  // hidden -> latent_c
    hidden: usize,
}

pub struct DenoiserCache {
    z: Array3<f64>,
    a0: Array3<f64>,
    p: Array3<f64>,
    a1: Array3<f64>,
    m1b: Array3<f64>,
    a2: Array3<f64>,
    cat: Array3<f64>,
    a3: Array3<f64>,
    o1: Array3<f64>,
    t_emb: Array1<f64>,
    cond: Array1<f64>,
}

impl Denoiser {
    pub fn new(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        let h = dims.hidden;
        Denoiser {
            conv_in: Conv2d::new(3, dims.latent_c, h, 1, 1, rng),
            conv_mid1: Conv2d::new(3, h, h, 1, 1, rng),
            t_proj: Dense::new(T_EMB_DIM, h, rng),
            cond_proj: Dense::new(dims.d_cond, h, rng),
            conv_mid2: Conv2d::new(3, h, h, 1, 1, rng),
            conv_up: Conv2d::new(3, 2 * h, h, 1, 1, rng),
            conv_out: Conv2d::new(3, h, dims.latent_c, 1, 1, rng),
            hidden: h,
        }
    }

    /// Predicts the noise in `z` at normalized timestep `u = t / T` under
    /// the given conditioning vector.
    pub fn forward(&self, z: &Array3<f64>, u: f64, cond: &Array1<f64>) -> (Array3<f64>, DenoiserCache) {
        let t_emb = t_embedding(u);
        let a0 = self.conv_in.forward(z);
        let h0 = relu(&a0);
        let p = avg_pool2(&h0);
        let a1 = self.conv_mid1.forward(&p);
        let m1 = relu(&a1);
        let bias = self.t_proj.forward(&t_emb) + self.cond_proj.forward(cond);
        let mut m1b = m1;
        for mut lane in m1b.lanes_mut(ndarray::Axis(2)) {
            lane += &bias;
        }
        let a2 = self.conv_mid2.forward(&m1b);
        let m2 = relu(&a2);
        let up = upsample2(&m2);
        let cat = concat_channels(&up, &h0);
        let a3 = self.conv_up.forward(&cat);
        let o1 = relu(&a3);
        let eps_hat = self.conv_out.forward(&o1);
        let cache = DenoiserCache {
            z: z.clone(),
            a0,
            p,
            a1,
            m1b,
            a2,
            cat,
            a3,
            o1,
            t_emb,
            cond: cond.clone(),
        };
        (eps_hat, cache)
    }

    /// Accumulates parameter gradients; returns (grad wrt z, grad wrt cond).
    pub fn backward(&mut self, cache: &DenoiserCache, g_out: &Array3<f64>) -> (Array3<f64>, Array1<f64>) {
        let g_o1 = self.conv_out.backward(&cache.o1, g_out);
        let g_a3 = relu_backward(&cache.a3, &g_o1);
        let g_cat = self.conv_up.backward(&cache.cat, &g_a3);
        let (g_up, g_h0_skip) = split_channels(&g_cat, self.hidden);
        let g_m2 = upsample2_backward(&g_up);
        let g_a2 = relu_backward(&cache.a2, &g_m2);
        let g_m1b = self.conv_mid2.backward(&cache.m1b, &g_a2);
        let mut g_bias = Array1::zeros(self.hidden);
        for lane in g_m1b.lanes(ndarray::Axis(2)) {
            g_bias += &lane;
        }
        self.t_proj.backward(&cache.t_emb, &g_bias);
        let g_cond = self.cond_proj.backward(&cache.cond, &g_bias);
        let g_a1 = relu_backward(&cache.a1, &g_m1b);
        let g_p = self.conv_mid1.backward(&cache.p, &g_a1);
        let g_h0 = avg_pool2_backward(&g_p) + &g_h0_skip;
        let g_a0 = relu_backward(&cache.a0, &g_h0);
        let g_z = self.conv_in.backward(&cache.z, &g_a0);
        (g_z, g_cond)
    }

    pub fn params(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv_in.params();
        p.extend(self.conv_mid1.params());
        p.extend(self.t_proj.params());
        p.extend(self.cond_proj.params());
        p.extend(self.conv_mid2.params());
        p.extend(self.conv_up.params());
        p.extend(self.conv_out.params());
        p
    }

    pub fn params_ref(&self) -> Vec<&Param> {
        vec![
            &self.conv_in.w,
            &self.conv_in.b,
            &self.conv_mid1.w,
            &self.conv_mid1.b,
            &self.t_proj.w,
            &self.t_proj.b,
            &self.cond_proj.w,
            &self.cond_proj.b,
            &self.conv_mid2.w,
            &self.conv_mid2.b,
            &self.conv_up.w,
            &self.conv_up.b,
            &self.conv_out.w,
            &self.conv_out.b,
        ]
    }
}
