//! Minimal plotting: 2-D PCA projection, scatter and line charts, and
//! image grids, all rendered straight into PNG files. Nothing here is
//! interactive; charts are diagnostics written next to the metrics.

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::Image as DomainImage;

/// Projects points onto their top two principal components (power
/// iteration with deflation). Returns one (x, y) pair per input point.
pub fn pca_2d(points: &[Array1<f64>]) -> Result<Vec<[f64; 2]>> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("PCA needs at least one point".into()));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::ShapeMismatch {
            expected: format!("{d}-dimensional points"),
            actual: "mixed dimensions".into(),
        });
    }
    let n = points.len() as f64;
    let mut mean = Array1::<f64>::zeros(d);
    for p in points {
        mean += p;
    }
    mean /= n;
    let mut cov = Array2::<f64>::zeros((d, d));
    for p in points {
        let c = p - &mean;
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += c[i] * c[j] / n;
            }
        }
    }
    let mut axes: Vec<Array1<f64>> = Vec::with_capacity(2);
    for k in 0..2.min(d) {
        // Deterministic start vector, orthogonal restarts handled by
        // deflation below.
        let mut v = Array1::from_shape_fn(d, |i| if i == k { 1.0 } else { 1e-3 });
        for _ in 0..200 {
            let mut w = cov.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm < 1e-300 {
                break;
            }
            w /= norm;
            v = w;
        }
        let lambda = v.dot(&cov.dot(&v));
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] -= lambda * v[i] * v[j];
            }
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(Array1::zeros(d));
    }
    Ok(points
        .iter()
        .map(|p| {
            let c = p - &mean;
            [axes[0].dot(&c), axes[1].dot(&c)]
        })
        .collect())
}

/// A named point set with a fixed color.
pub struct Series {
    pub label: String,
    pub points: Vec<[f64; 2]>,
    pub color: [u8; 3],
}

const MARGIN: u32 = 40;

fn bounds(series: &[Series]) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for s in series {
        for p in &s.points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    for a in 0..2 {
        if !lo[a].is_finite() || hi[a] - lo[a] < 1e-12 {
            lo[a] -= 0.5;
            hi[a] = lo[a] + 1.0;
        }
    }
    (lo, hi)
}

fn canvas(w: u32, h: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for x in MARGIN..w - MARGIN {
        img.put_pixel(x, h - MARGIN, Rgb([0, 0, 0]));
    }
    for y in MARGIN..h - MARGIN {
        img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
    }
    img
}

fn to_px(p: [f64; 2], lo: [f64; 2], hi: [f64; 2], w: u32, h: u32) -> (i64, i64) {
    let fx = (p[0] - lo[0]) / (hi[0] - lo[0]);
    let fy = (p[1] - lo[1]) / (hi[1] - lo[1]);
    let x = MARGIN as f64 + fx * (w - 2 * MARGIN) as f64;
    let y = (h - MARGIN) as f64 - fy * (h - 2 * MARGIN) as f64;
    (x.round() as i64, y.round() as i64)
}

fn put_dot(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    for dy in -1..=1i64 {
        for dx in -1..=1i64 {
            let (px, py) = (x + dx, y + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, Rgb(color));
            }
        }
    }
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: [u8; 3]) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for s in 0..=steps {
        let x = a.0 + (b.0 - a.0) * s / steps;
        let y = a.1 + (b.1 - a.1) * s / steps;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

/// Scatter plot of the series, auto-scaled, written as PNG.
pub fn scatter_png(path: &Path, series: &[Series]) -> Result<()> {
    let (w, h) = (640u32, 480u32);
    let (lo, hi) = bounds(series);
    let mut img = canvas(w, h);
    for s in series {
        for &p in &s.points {
            let (x, y) = to_px(p, lo, hi, w, h);
            put_dot(&mut img, x, y, s.color);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Line chart: each series' points are sorted by x and connected.
pub fn line_png(path: &Path, series: &[Series]) -> Result<()> {
    let (w, h) = (640u32, 480u32);
    let (lo, hi) = bounds(series);
    let mut img = canvas(w, h);
    for s in series {
        let mut pts = s.points.clone();
        pts.sort_by(|a, b| a[0].partial_cmp(&b[0]).expect("finite coordinates"));
        let px: Vec<(i64, i64)> = pts.iter().map(|&p| to_px(p, lo, hi, w, h)).collect();
        for pair in px.windows(2) {
            draw_line(&mut img, pair[0], pair[1], s.color);
        }
        for &(x, y) in &px {
            put_dot(&mut img, x, y, s.color);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Tiles images left-to-right, top-to-bottom, `cols` per row.
pub fn image_grid_png(path: &Path, images: &[DomainImage], cols: usize) -> Result<()> {
    if images.is_empty() || cols == 0 {
        return Err(Error::InvalidArgument("grid needs images and cols >= 1".into()));
    }
    let (h, w) = (images[0].height(), images[0].width());
    if images.iter().any(|i| i.height() != h || i.width() != w) {
        return Err(Error::InvalidArgument("grid images must share one shape".into()));
    }
    let rows = images.len().div_ceil(cols);
    let pad = 2usize;
    let mut img = RgbImage::from_pixel(
        (cols * (w + pad) + pad) as u32,
        (rows * (h + pad) + pad) as u32,
        Rgb([32, 32, 32]),
    );
    for (i, src) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let (oy, ox) = (pad + r * (h + pad), pad + c * (w + pad));
        for y in 0..h {
            for x in 0..w {
                let px = Rgb([
                    (src.pixels()[[y, x, 0]] * 255.0).round() as u8,
                    (src.pixels()[[y, x, 1]] * 255.0).round() as u8,
                    (src.pixels()[[y, x, 2]] * 255.0).round() as u8,
                ]);
                img.put_pixel((ox + x) as u32, (oy + y) as u32, px);
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Centroid of a projected point set; used for the real-vs-synthetic
/// cloud-distance measurement.
pub fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 2];
    for p in points {
        c[0] += p[0] / n;
        c[1] += p[1] / n;
    }
    c
}
