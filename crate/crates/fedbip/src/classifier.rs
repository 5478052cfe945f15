//! The downstream image classifier: three conv blocks with average
//! pooling, global average pooling into a feature vector, and a linear
//! head. The penultimate features double as the embedding space for
//! nearest-neighbor retrieval and projection plots.

use ndarray::{Array1, Array3};
use rand::Rng;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Dense, Optimizer, Param, avg_pool2, avg_pool2_backward, relu, relu_backward};
use crate::types::LabeledExample;

const C1: usize = 8;
const C2: usize = 16;
const C3: usize = 16;

#[derive(Debug, Clone)]
pub struct Classifier {
    pub b1: Conv2d, // 3 -> C1
    pub b2: Conv2d, // C1 -> C2
    pub b3: Conv2d, // C2 -> C3
    pub head: Dense, // C3 -> num_classes
    num_classes: usize,
}

pub struct ClassifierCache {
    x: Array3<f64>,
    a1: Array3<f64>,
    p1: Array3<f64>,
    a2: Array3<f64>,
    p2: Array3<f64>,
    a3: Array3<f64>,
    h3: Array3<f64>,
    features: Array1<f64>,
}

impl Classifier {
    pub fn new(num_classes: usize, rng: &mut impl Rng) -> Self {
        Classifier {
            b1: Conv2d::new(3, 3, C1, 1, 1, rng),
            b2: Conv2d::new(3, C1, C2, 1, 1, rng),
            b3: Conv2d::new(3, C2, C3, 1, 1, rng),
            head: Dense::new(C3, num_classes, rng),
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn forward(&self, x: &Array3<f64>) -> (Array1<f64>, ClassifierCache) {
        let a1 = self.b1.forward(x);
        let p1 = avg_pool2(&relu(&a1));
        let a2 = self.b2.forward(&p1);
        let p2 = avg_pool2(&relu(&a2));
        let a3 = self.b3.forward(&p2);
        let h3 = relu(&a3);
        let (h, w, c) = (h3.shape()[0], h3.shape()[1], h3.shape()[2]);
        let mut features = Array1::zeros(c);
        for ci in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    acc += h3[[y, xx, ci]];
                }
            }
            features[ci] = acc / (h * w) as f64;
        }
        let logits = self.head.forward(&features);
        (logits, ClassifierCache { x: x.clone(), a1, p1, a2, p2, a3, h3, features })
    }

    pub fn logits(&self, x: &Array3<f64>) -> Array1<f64> {
        self.forward(x).0
    }

    /// The penultimate (global-average-pooled) feature vector.
    pub fn features(&self, x: &Array3<f64>) -> Array1<f64> {
        self.forward(x).1.features
    }

    pub fn predict(&self, x: &Array3<f64>) -> usize {
        argmax(&self.logits(x))
    }

    fn backward(&mut self, cache: &ClassifierCache, g_logits: &Array1<f64>) {
        let g_feat = self.head.backward(&cache.features, g_logits);
        let (h, w, c) = (cache.h3.shape()[0], cache.h3.shape()[1], cache.h3.shape()[2]);
        let mut g_h3 = Array3::zeros((h, w, c));
        for ci in 0..c {
            let g = g_feat[ci] / (h * w) as f64;
            for y in 0..h {
                for xx in 0..w {
                    g_h3[[y, xx, ci]] = g;
                }
            }
        }
        let g_a3 = relu_backward(&cache.a3, &g_h3);
        let g_p2 = self.b3.backward(&cache.p2, &g_a3);
        let g_r2 = relu_backward(&cache.a2, &avg_pool2_backward(&g_p2));
        let g_p1 = self.b2.backward(&cache.p1, &g_r2);
        let g_r1 = relu_backward(&cache.a1, &avg_pool2_backward(&g_p1));
        self.b1.backward(&cache.x, &g_r1);
    }

    pub fn params(&mut self) -> Vec<&mut Param> {
        let mut p = self.b1.params();
        p.extend(self.b2.params());
        p.extend(self.b3.params());
        p.extend(self.head.params());
        p
    }

    pub fn params_ref(&self) -> Vec<&Param> {
        vec![
            &self.b1.w, &self.b1.b, &self.b2.w, &self.b2.b, &self.b3.w, &self.b3.b,
            &self.head.w, &self.head.b,
        ]
    }
}

fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax probabilities from logits (numerically stabilized).
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps = logits.mapv(|v| (v - m).exp());
    let z = exps.sum();
    exps / z
}

/// Cross-entropy of one example in nats.
pub fn cross_entropy(logits: &Array1<f64>, label: usize) -> f64 {
    -softmax(logits)[label].max(1e-300).ln()
}

/// Runs `epochs` of minibatch SGD with momentum on `clf` in place;
/// returns the per-epoch mean cross-entropy. Shared by the synthetic-data
/// path and the multi-round/centralized baselines.
pub fn train_epochs(
    clf: &mut Classifier,
    data: &[LabeledExample],
    epochs: usize,
    lr: f64,
    momentum: f64,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("classifier training set is empty".into()));
    }
    if let Some(bad) = data.iter().find(|e| e.label >= clf.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for C={}",
            bad.label, clf.num_classes
        )));
    }
    let batch = batch.max(1);
    let mut opt = Optimizer::Momentum { lr, mu: momentum };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            for &i in chunk {
                let e = &data[i];
                let (logits, cache) = clf.forward(e.image.pixels());
                epoch_loss += cross_entropy(&logits, e.label);
                let mut g = softmax(&logits);
                g[e.label] -= 1.0;
                g /= chunk.len() as f64;
                clf.backward(&cache, &g);
            }
            opt.step(&mut clf.params());
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence(format!(
                "classifier loss became non-finite at epoch {epoch}"
            )));
        }
        trace.push(mean);
    }
    Ok(trace)
}

/// Top-1 accuracy on a labeled set.
pub fn accuracy(clf: &Classifier, data: &[LabeledExample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data.iter().filter(|e| clf.predict(e.image.pixels()) == e.label).count();
    hits as f64 / data.len() as f64
}
