//! Minimal dense/convolutional layers with hand-written backprop.
//!
//! Feature maps are (h, w, c) `f64` arrays; conv weights are
//! (kh, kw, c_in, c_out). Everything runs per-sample; batching is a loop
//! at the call site with gradient accumulation. All math is f64 so
//! finite-difference gradient checks hold to tight tolerances.

use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A trainable tensor with its gradient accumulator and lazily allocated
/// optimizer state.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    state1: Option<ArrayD<f64>>,
    state2: Option<ArrayD<f64>>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad, state1: None, state2: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng));
        Param::new(value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Momentum { lr: f64, mu: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, t: u64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        match self {
            Optimizer::Sgd { lr } => {
                for p in params.iter_mut() {
                    p.value.scaled_add(-*lr, &p.grad);
                }
            }
            Optimizer::Momentum { lr, mu } => {
                for p in params.iter_mut() {
                    let m = p
                        .state1
                        .get_or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
                    m.mapv_inplace(|x| x * *mu);
                    *m += &p.grad;
                    p.value.scaled_add(-*lr, m);
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, t } => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for p in params.iter_mut() {
                    let dim = p.value.raw_dim();
                    let m = p.state1.get_or_insert_with(|| ArrayD::zeros(dim.clone()));
                    let v = p.state2.get_or_insert_with(|| ArrayD::zeros(dim));
                    ndarray::Zip::from(&mut *m).and(&p.grad).for_each(|m, &g| {
                        *m = *beta1 * *m + (1.0 - *beta1) * g;
                    });
                    ndarray::Zip::from(&mut *v).and(&p.grad).for_each(|v, &g| {
                        *v = *beta2 * *v + (1.0 - *beta2) * g * g;
                    });
                    ndarray::Zip::from(&mut p.value)
                        .and(&*m)
                        .and(&*v)
                        .for_each(|w, &m, &v| {
                            let mhat = m / bc1;
                            let vhat = v / bc2;
                            *w -= *lr * mhat / (vhat.sqrt() + *eps);
                        });
                }
            }
        }
        for p in params.iter_mut() {
            p.zero_grad();
        }
    }
}

/// 2-D convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(k: usize, c_in: usize, c_out: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (k * k * c_in) as f64;
        Conv2d {
            w: Param::randn(&[k, k, c_in, c_out], (2.0 / fan_in).sqrt(), rng),
            b: Param::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.value.shape()[0];
        ((h + 2 * self.pad - k) / self.stride + 1, (w + 2 * self.pad - k) / self.stride + 1)
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let c_in = x.shape()[2];
        let k = self.w.value.shape()[0];
        let c_out = self.w.value.shape()[3];
        let (oh, ow) = self.out_hw(h, w);
        let wv = &self.w.value;
        let bv = &self.b.value;
        let mut out = Array3::zeros((oh, ow, c_out));
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..c_in {
                            let xv = x[[iy as usize, ix as usize, ci]];
                            if xv == 0.0 {
                                continue;
                            }
                            for co in 0..c_out {
                                out[[oy, ox, co]] += xv * wv[[ky, kx, ci, co]];
                            }
                        }
                    }
                }
                for co in 0..c_out {
                    out[[oy, ox, co]] += bv[co];
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array3<f64>, gout: &Array3<f64>) -> Array3<f64> {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let c_in = x.shape()[2];
        let k = self.w.value.shape()[0];
        let c_out = self.w.value.shape()[3];
        let (oh, ow) = self.out_hw(h, w);
        let mut gx = Array3::zeros((h, w, c_in));
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..c_out {
                    let g = gout[[oy, ox, co]];
                    if g == 0.0 {
                        continue;
                    }
                    self.b.grad[co] += g;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c_in {
                                let wv = self.w.value[[ky, kx, ci, co]];
                                self.w.grad[[ky, kx, ci, co]] +=
                                    g * x[[iy as usize, ix as usize, ci]];
                                gx[[iy as usize, ix as usize, ci]] += g * wv;
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn params(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Fully connected layer on 1-D vectors.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Param, // (d_in, d_out)
    pub b: Param,
}

impl Dense {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Dense {
            w: Param::randn(&[d_in, d_out], (2.0 / d_in as f64).sqrt(), rng),
            b: Param::zeros(&[d_out]),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        let (d_in, d_out) = (self.w.value.shape()[0], self.w.value.shape()[1]);
        let mut out = Array1::zeros(d_out);
        for o in 0..d_out {
            let mut acc = self.b.value[o];
            for i in 0..d_in {
                acc += x[i] * self.w.value[[i, o]];
            }
            out[o] = acc;
        }
        out
    }

    pub fn backward(&mut self, x: &Array1<f64>, gout: &Array1<f64>) -> Array1<f64> {
        let (d_in, d_out) = (self.w.value.shape()[0], self.w.value.shape()[1]);
        let mut gx = Array1::zeros(d_in);
        for o in 0..d_out {
            let g = gout[o];
            self.b.grad[o] += g;
            for i in 0..d_in {
                self.w.grad[[i, o]] += g * x[i];
                gx[i] += g * self.w.value[[i, o]];
            }
        }
        gx
    }

    pub fn params(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &Array3<f64>, gout: &Array3<f64>) -> Array3<f64> {
    let mut gx = gout.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

pub fn sigmoid(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward through sigmoid given the forward output `y`.
pub fn sigmoid_backward(y: &Array3<f64>, gout: &Array3<f64>) -> Array3<f64> {
    let mut gx = gout.clone();
    ndarray::Zip::from(&mut gx).and(y).for_each(|g, &v| {
        *g *= v * (1.0 - v);
    });
    gx
}

/// 2x2 average pooling, stride 2.
pub fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Array3::zeros((h / 2, w / 2, c));
    for oy in 0..h / 2 {
        for ox in 0..w / 2 {
            for ci in 0..c {
                out[[oy, ox, ci]] = 0.25
                    * (x[[2 * oy, 2 * ox, ci]]
                        + x[[2 * oy + 1, 2 * ox, ci]]
                        + x[[2 * oy, 2 * ox + 1, ci]]
                        + x[[2 * oy + 1, 2 * ox + 1, ci]]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(gout: &Array3<f64>) -> Array3<f64> {
    let (oh, ow, c) = (gout.shape()[0], gout.shape()[1], gout.shape()[2]);
    let mut gx = Array3::zeros((oh * 2, ow * 2, c));
    for oy in 0..oh {
        for ox in 0..ow {
            for ci in 0..c {
                let g = gout[[oy, ox, ci]] * 0.25;
                gx[[2 * oy, 2 * ox, ci]] = g;
                gx[[2 * oy + 1, 2 * ox, ci]] = g;
                gx[[2 * oy, 2 * ox + 1, ci]] = g;
                gx[[2 * oy + 1, 2 * ox + 1, ci]] = g;
            }
        }
    }
    gx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Array3::zeros((h * 2, w * 2, c));
    for y in 0..h * 2 {
        for xw in 0..w * 2 {
            for ci in 0..c {
                out[[y, xw, ci]] = x[[y / 2, xw / 2, ci]];
            }
        }
    }
    out
}

pub fn upsample2_backward(gout: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = (gout.shape()[0] / 2, gout.shape()[1] / 2, gout.shape()[2]);
    let mut gx = Array3::zeros((h, w, c));
    for y in 0..h * 2 {
        for xw in 0..w * 2 {
            for ci in 0..c {
                gx[[y / 2, xw / 2, ci]] += gout[[y, xw, ci]];
            }
        }
    }
    gx
}

/// Channel concatenation, with the matching backward split.
pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let (ca, cb) = (a.shape()[2], b.shape()[2]);
    let mut out = Array3::zeros((h, w, ca + cb));
    for y in 0..h {
        for x in 0..w {
            for c in 0..ca {
                out[[y, x, c]] = a[[y, x, c]];
            }
            for c in 0..cb {
                out[[y, x, ca + c]] = b[[y, x, c]];
            }
        }
    }
    out
}

pub fn split_channels(g: &Array3<f64>, ca: usize) -> (Array3<f64>, Array3<f64>) {
    let (h, w, ct) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut ga = Array3::zeros((h, w, ca));
    let mut gb = Array3::zeros((h, w, ct - ca));
    for y in 0..h {
        for x in 0..w {
            for c in 0..ca {
                ga[[y, x, c]] = g[[y, x, c]];
            }
            for c in 0..ct - ca {
                gb[[y, x, c]] = g[[y, x, ca + c]];
            }
        }
    }
    (ga, gb)
}

/// Flattens the given params into one vector (fixed order), used for
/// weight averaging, checksums, and checkpoint blobs.
pub fn flatten_params(params: &[&Param]) -> Vec<f64> {
    params.iter().flat_map(|p| p.value.iter().copied()).collect()
}

pub fn load_flat_params(params: &mut [&mut Param], flat: &[f64]) {
    let mut offset = 0;
    for p in params.iter_mut() {
        let len = p.value.len();
        let slice = &flat[offset..offset + len];
        for (dst, &src) in p.value.iter_mut().zip(slice) {
            *dst = src;
        }
        offset += len;
    }
    assert_eq!(offset, flat.len(), "flat vector length mismatch");
}

/// SHA-256 over the little-endian f64 bytes of all parameter values.
pub fn checksum_params(params: &[&Param]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for p in params {
        for v in p.value.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;
    use crate::rng::{RngScope, derive_rng};

    /// Central finite differences of a scalar loss with respect to a
    /// parameter tensor; the independent oracle for every backward pass.
    fn fd_grad(
        value: &mut ArrayD<f64>,
        mut loss: impl FnMut(&ArrayD<f64>) -> f64,
        eps: f64,
    ) -> ArrayD<f64> {
        let mut grad = ArrayD::zeros(value.raw_dim());
        for ix in 0..value.len() {
            let orig = value.as_slice().unwrap()[ix];
            value.as_slice_mut().unwrap()[ix] = orig + eps;
            let hi = loss(value);
            value.as_slice_mut().unwrap()[ix] = orig - eps;
            let lo = loss(value);
            value.as_slice_mut().unwrap()[ix] = orig;
            grad.as_slice_mut().unwrap()[ix] = (hi - lo) / (2.0 * eps);
        }
        grad
    }

    fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = derive_rng(1, RngScope::Train, 0);
        let mut conv = Conv2d::new(3, 2, 3, 2, 1, &mut rng);
        let x = Array3::from_shape_fn((6, 6, 2), |_| rng.random_range(-1.0..1.0));
        let target = {
            let y = conv.forward(&x);
            let s = y.shape();
            Array3::from_shape_fn((s[0], s[1], s[2]), |_| rng.random_range(-1.0..1.0))
        };
        // loss = 0.5 * ||conv(x) - target||^2, so gout = y - target.
        let y = conv.forward(&x);
        let gout = &y - &target;
        let gx = conv.backward(&x, &gout);

        let conv2 = conv.clone();
        let mut w = conv.w.value.clone();
        let fd_w = fd_grad(
            &mut w,
            |w| {
                let mut c = conv2.clone();
                c.w.value = w.clone();
                let y = c.forward(&x);
                0.5 * (&y - &target).mapv(|v| v * v).sum()
            },
            1e-5,
        );
        assert!(max_rel_err(&conv.w.grad, &fd_w) < 1e-6);

        let mut xd = x.clone().into_dyn();
        let fd_x = fd_grad(
            &mut xd,
            |x| {
                let x3 = x.clone().into_dimensionality().unwrap();
                let y = conv2.forward(&x3);
                0.5 * (&y - &target).mapv(|v| v * v).sum()
            },
            1e-5,
        );
        assert!(max_rel_err(&gx.into_dyn(), &fd_x) < 1e-6);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = derive_rng(2, RngScope::Train, 0);
        let mut dense = Dense::new(5, 4, &mut rng);
        let x = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        let target = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let y = dense.forward(&x);
        let gout = &y - &target;
        let gx = dense.backward(&x, &gout);

        let dense2 = dense.clone();
        let mut w = dense.w.value.clone();
        let fd_w = fd_grad(
            &mut w,
            |w| {
                let mut d = dense2.clone();
                d.w.value = w.clone();
                let y = d.forward(&x);
                0.5 * (&y - &target).mapv(|v| v * v).sum()
            },
            1e-6,
        );
        assert!(max_rel_err(&dense.w.grad, &fd_w) < 1e-6);

        let mut xd = x.clone().into_dyn();
        let fd_x = fd_grad(
            &mut xd,
            |x| {
                let x1: Array1<f64> = x.clone().into_dimensionality().unwrap();
                let y = dense2.forward(&x1);
                0.5 * (&y - &target).mapv(|v| v * v).sum()
            },
            1e-6,
        );
        assert!(max_rel_err(&gx.into_dyn(), &fd_x) < 1e-6);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_shapes() {
        let mut rng = derive_rng(3, RngScope::Train, 0);
        let x = Array3::from_shape_fn((4, 4, 2), |_| rng.random_range(-1.0..1.0));
        assert_eq!(avg_pool2(&x).shape(), &[2, 2, 2]);
        assert_eq!(upsample2(&x).shape(), &[8, 8, 2]);
        // <pool(x), g> == <x, pool_backward(g)>
        let g = Array3::from_shape_fn((2, 2, 2), |_| rng.random_range(-1.0..1.0));
        let lhs = (&avg_pool2(&x) * &g).sum();
        let rhs = (&x * &avg_pool2_backward(&g)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let g2 = Array3::from_shape_fn((8, 8, 2), |_| rng.random_range(-1.0..1.0));
        let lhs = (&upsample2(&x) * &g2).sum();
        let rhs = (&x * &upsample2_backward(&g2)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn momentum_sgd_matches_hand_computation() {
        let mut p = Param::new(ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, -2.0]).unwrap());
        p.grad = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, 1.0]).unwrap();
        let mut opt = Optimizer::Momentum { lr: 0.1, mu: 0.9 };
        opt.step(&mut [&mut p]);
        // m = g, w -= lr * m
        assert!((p.value[0] - 0.95).abs() < 1e-15);
        p.grad = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, 1.0]).unwrap();
        opt.step(&mut [&mut p]);
        // m = 0.9*0.5 + 0.5 = 0.95, w = 0.95 - 0.095
        assert!((p.value[0] - 0.855).abs() < 1e-15);
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = derive_rng(4, RngScope::Train, 0);
        let conv = Conv2d::new(3, 2, 2, 1, 1, &mut rng);
        let flat = flatten_params(&[&conv.w, &conv.b]);
        let mut conv2 = Conv2d::new(3, 2, 2, 1, 1, &mut rng);
        load_flat_params(&mut conv2.params(), &flat);
        assert_eq!(conv.w.value, conv2.w.value);
        assert_eq!(
            checksum_params(&[&conv.w, &conv.b]),
            checksum_params(&[&conv2.w, &conv2.b])
        );
    }
}
