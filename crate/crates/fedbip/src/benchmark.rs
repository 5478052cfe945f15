//! Procedurally generated multi-domain image benchmark.
//!
//! Classes are shape geometries; domains are deterministic rendering
//! styles applied to the same geometry, so the domain shift is
//! controllable and testable. The same grouped-dataset shape is produced
//! by folder ingestion, so downstream code does not care where the images
//! came from.

use ndarray::Array3;
use rand::{Rng, RngExt};

use crate::error::{Error, Result};
use crate::types::Image;

pub const CLASS_NAMES: [&str; 6] = ["circle", "square", "triangle", "cross", "diamond", "ring"];
pub const DOMAIN_NAMES: [&str; 4] = ["stroke", "filled", "inverted", "blurred"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmarkSpec {
    pub classes: usize,
    pub domains: usize,
    pub per_cell: usize,
    pub image_size: usize,
}

impl SyntheticBenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 3 || self.classes > CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "classes must be in 3..={}, got {}",
                CLASS_NAMES.len(),
                self.classes
            )));
        }
        if self.domains < 2 || self.domains > DOMAIN_NAMES.len() {
            return Err(Error::Config(format!(
                "domains must be in 2..={}, got {}",
                DOMAIN_NAMES.len(),
                self.domains
            )));
        }
        if self.per_cell == 0 || self.image_size < 16 {
            return Err(Error::Config("per_cell >= 1 and image_size >= 16 required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GroupedExample {
    pub domain: usize,
    pub class: usize,
    pub image: Image,
}

/// A dataset grouped by (domain, class), the common currency of the
/// benchmark generator, folder ingestion, and the partitioners.
#[derive(Debug, Clone)]
pub struct GroupedDataset {
    pub domain_names: Vec<String>,
    pub class_names: Vec<String>,
    pub examples: Vec<GroupedExample>,
}

impl GroupedDataset {
    pub fn cell(&self, domain: usize, class: usize) -> Vec<&GroupedExample> {
        self.examples
            .iter()
            .filter(|e| e.domain == domain && e.class == class)
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }

    /// Keeps only the listed domains (used to withhold the rare domain
    /// from the pretraining corpus).
    pub fn restrict_domains(&self, keep: &[usize]) -> GroupedDataset {
        GroupedDataset {
            domain_names: self.domain_names.clone(),
            class_names: self.class_names.clone(),
            examples: self
                .examples
                .iter()
                .filter(|e| keep.contains(&e.domain))
                .cloned()
                .collect(),
        }
    }
}

// Signed distance-ish membership tests on normalized coords in [-1, 1].
fn shape_mask(class: usize, size: usize, cx: f64, cy: f64, r: f64) -> Vec<Vec<bool>> {
    let mut mask = vec![vec![false; size]; size];
    for (y, row) in mask.iter_mut().enumerate() {
        for (x, m) in row.iter_mut().enumerate() {
            let u = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0 - cx;
            let v = (y as f64 + 0.5) / size as f64 * 2.0 - 1.0 - cy;
            *m = match class {
                0 => (u * u + v * v).sqrt() < r,
                1 => u.abs() < r * 0.9 && v.abs() < r * 0.9,
                2 => {
                    // upward triangle
                    let vv = v + r * 0.5;
                    vv > -r * 0.4 && vv < r && u.abs() < (r - vv) * 0.9
                }
                3 => (u.abs() < r * 0.3 && v.abs() < r) || (v.abs() < r * 0.3 && u.abs() < r),
                4 => u.abs() + v.abs() < r * 1.2,
                5 => {
                    let d = (u * u + v * v).sqrt();
                    d < r && d > r * 0.55
                }
                _ => unreachable!("class id out of range"),
            };
        }
    }
    mask
}

fn boundary(mask: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let n = mask.len();
    let mut edge = vec![vec![false; n]; n];
    for y in 0..n {
        for x in 0..n {
            if !mask[y][x] {
                continue;
            }
            let interior = y > 0
                && y + 1 < n
                && x > 0
                && x + 1 < n
                && mask[y - 1][x]
                && mask[y + 1][x]
                && mask[y][x - 1]
                && mask[y][x + 1];
            edge[y][x] = !interior;
        }
    }
    edge
}

fn box_blur(px: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = (px.shape()[0], px.shape()[1], px.shape()[2]);
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                            acc += px[[yy as usize, xx as usize, ch]];
                            n += 1.0;
                        }
                    }
                }
                out[[y, x, ch]] = acc / n;
            }
        }
    }
    out
}

fn render(domain: usize, class: usize, size: usize, rng: &mut impl Rng) -> Image {
    let cx = rng.random_range(-0.12..0.12);
    let cy = rng.random_range(-0.12..0.12);
    let r = rng.random_range(0.42..0.6);
    let mask = shape_mask(class, size, cx, cy, r);
    let mut px = Array3::zeros((size, size, 3));
    match domain {
        // Thin bright outline on a dark background.
        0 => {
            let edge = boundary(&mask);
            for y in 0..size {
                for x in 0..size {
                    let bg = 0.04 + rng.random_range(0.0..0.03);
                    let val = if edge[y][x] { 0.88 + rng.random_range(0.0..0.1) } else { bg };
                    for ch in 0..3 {
                        px[[y, x, ch]] = val;
                    }
                }
            }
        }
        // Bright textured fill with a warm tint on a mid background.
        1 => {
            let tint = [1.0, 0.85, 0.7];
            for y in 0..size {
                for x in 0..size {
                    let texture =
                        0.08 * ((x as f64 * 0.9).sin() * (y as f64 * 0.9).cos());
                    let base = if mask[y][x] {
                        0.82 + texture + rng.random_range(-0.05..0.05)
                    } else {
                        0.30 + rng.random_range(-0.03..0.03)
                    };
                    for ch in 0..3 {
                        px[[y, x, ch]] = base * tint[ch];
                    }
                }
            }
        }
        // Inverted brightness plus heavier noise, cool tint.
        2 => {
            let tint = [0.7, 0.85, 1.0];
            for y in 0..size {
                for x in 0..size {
                    let base = if mask[y][x] {
                        0.10 + rng.random_range(0.0..0.08)
                    } else {
                        0.90 - rng.random_range(0.0..0.10)
                    };
                    for ch in 0..3 {
                        px[[y, x, ch]] = base * tint[ch];
                    }
                }
            }
        }
        // Filled then blurred twice.
        3 => {
            for y in 0..size {
                for x in 0..size {
                    let base = if mask[y][x] {
                        0.85 + rng.random_range(-0.05..0.05)
                    } else {
                        0.20 + rng.random_range(-0.03..0.03)
                    };
                    for ch in 0..3 {
                        px[[y, x, ch]] = base;
                    }
                }
            }
            px = box_blur(&box_blur(&px));
        }
        _ => unreachable!("domain id out of range"),
    }
    Image::from_unclamped(px).expect("rendered image is finite")
}

/// Generates the full benchmark: `per_cell` images for every
/// (domain, class) cell, deterministic given the RNG stream.
pub fn generate_benchmark(
    spec: &SyntheticBenchmarkSpec,
    rng: &mut impl Rng,
) -> Result<GroupedDataset> {
    spec.validate()?;
    let mut examples = Vec::with_capacity(spec.domains * spec.classes * spec.per_cell);
    for domain in 0..spec.domains {
        for class in 0..spec.classes {
            for _ in 0..spec.per_cell {
                examples.push(GroupedExample {
                    domain,
                    class,
                    image: render(domain, class, spec.image_size, rng),
                });
            }
        }
    }
    Ok(GroupedDataset {
        domain_names: DOMAIN_NAMES[..spec.domains].iter().map(|s| s.to_string()).collect(),
        class_names: CLASS_NAMES[..spec.classes].iter().map(|s| s.to_string()).collect(),
        examples,
    })
}
