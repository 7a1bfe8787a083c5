use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::image::LabelMask;

fn overlap(a: &LabelMask, b: &LabelMask) -> Result<(usize, usize, usize)> {
    ensure_arg!(
        a.shape() == b.shape(),
        "mask shapes differ: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let (mut inter, mut na, mut nb) = (0, 0, 0);
    for (&x, &y) in a.pixels.iter().zip(b.pixels.iter()) {
        inter += (x & y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    Ok((inter, na, nb))
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    })
}

/// `|A∩B| / |A∪B|`; two empty masks score 1.
pub fn iou(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    let union = na + nb - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Dice of the stacked volumes.
pub fn dice3d(pred: &[LabelMask], reference: &[LabelMask]) -> Result<f64> {
    ensure_arg!(
        pred.len() == reference.len(),
        "volume slice counts differ: {} vs {}",
        pred.len(),
        reference.len()
    );
    ensure_arg!(!pred.is_empty(), "volumes must hold at least one slice");
    let (mut inter, mut total) = (0usize, 0usize);
    for (p, r) in pred.iter().zip(reference) {
        let (i, na, nb) = overlap(p, r)?;
        inter += i;
        total += na + nb;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

pub fn mse(x: &Array2<f32>, y: &Array2<f32>) -> Result<f64> {
    ensure_arg!(
        x.dim() == y.dim(),
        "image shapes differ: {:?} vs {:?}",
        x.dim(),
        y.dim()
    );
    let sum: f64 = x
        .iter()
        .zip(y.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / x.len() as f64)
}

/// SSIM constants and Gaussian window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub k1: f64,
    pub k2: f64,
    pub window: usize,
    pub sigma: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            window: 7,
            sigma: 1.5,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    /// Normalized separable Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Separable weighted filter over every fully contained window.
fn filter(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = img.dim();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let rows = Array2::from_shape_fn((h, ow), |(y, x)| (0..k).map(|i| taps[i] * img[[y, x + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        (0..k).map(|i| taps[i] * rows[[y + i, x]]).sum::<f64>()
    })
}

/// Mean structural similarity of two `[-1, 1]` images, rescaled to `[0, 1]`.
pub fn ssim(x: &Array2<f32>, y: &Array2<f32>, config: &SsimConfig) -> Result<f64> {
    ensure_arg!(
        x.dim() == y.dim(),
        "image shapes differ: {:?} vs {:?}",
        x.dim(),
        y.dim()
    );
    let (h, w) = x.dim();
    ensure_arg!(
        h >= config.window && w >= config.window,
        "images of {h}×{w} are smaller than the {0}×{0} SSIM window",
        config.window
    );
    let a = x.mapv(|v| (v as f64 + 1.0) / 2.0);
    let b = y.mapv(|v| (v as f64 + 1.0) / 2.0);
    let taps = config.taps();
    let mu_a = filter(&a, &taps);
    let mu_b = filter(&b, &taps);
    let aa = filter(&(&a * &a), &taps);
    let bb = filter(&(&b * &b), &taps);
    let ab = filter(&(&a * &b), &taps);
    let c1 = (config.k1 * config.dynamic_range).powi(2);
    let c2 = (config.k2 * config.dynamic_range).powi(2);
    let mut sum = 0.0;
    for idx in ndarray::indices(mu_a.dim()) {
        let (ma, mb) = (mu_a[idx], mu_b[idx]);
        let va = aa[idx] - ma * ma;
        let vb = bb[idx] - mb * mb;
        let cov = ab[idx] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(sum / mu_a.len() as f64)
}
