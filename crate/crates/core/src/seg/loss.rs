use ndarray::Array2;

use crate::error::{ensure_arg, Result};
use crate::image::LabelMask;

/// Default foreground weight of the segmentation loss.
pub const DEFAULT_FG_WEIGHT: f64 = 30.0;
/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the logarithms.
pub const EPS: f64 = 1e-7;

/// `mean(-[w·y·ln p + (1-y)·ln(1-p)])` over all pixels. The training path
/// uses the graph op with the same definition.
pub fn weighted_ce(prob: &Array2<f32>, target: &LabelMask, fg_weight: f64) -> Result<f64> {
    ensure_arg!(
        prob.dim() == target.shape(),
        "probability map {:?} and mask {:?} differ in shape",
        prob.dim(),
        target.shape()
    );
    ensure_arg!(fg_weight > 0.0, "fg_weight must be positive, got {fg_weight}");
    let mut sum = 0.0;
    for (&p, &y) in prob.iter().zip(target.pixels.iter()) {
        let p = (p as f64).clamp(EPS, 1.0 - EPS);
        let y = y as f64;
        sum -= fg_weight * y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(sum / prob.len() as f64)
}
