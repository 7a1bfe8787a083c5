use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{ensure_arg, Result};
use crate::image::{pixels_to_tensor, tensor_to_pixels, LabelMask};
use crate::seg::network::SegModel;

pub const DEFAULT_PASSES: usize = 10;
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Mean and population variance of Monte-Carlo dropout passes.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub mean_prob: Array2<f32>,
    pub variance: Array2<f32>,
    pub mask: LabelMask,
    pub passes: usize,
    /// The individual probability maps, in pass order.
    pub pass_maps: Vec<Array2<f32>>,
}

/// Seed of pass `k` under a prediction seed.
pub fn pass_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64)
}

/// Per-pixel mean and population variance, accumulated in `f64`.
pub fn mean_and_variance(maps: &[Array2<f32>]) -> (Array2<f32>, Array2<f32>) {
    let n = maps.len() as f64;
    let dim = maps[0].dim();
    let mut mean = Array2::<f64>::zeros(dim);
    for m in maps {
        mean.zip_mut_with(m, |a, &b| *a += b as f64);
    }
    mean.mapv_inplace(|v| v / n);
    let mut var = Array2::<f64>::zeros(dim);
    for m in maps {
        ndarray::Zip::from(&mut var)
            .and(m)
            .and(&mean)
            .for_each(|v, &x, &mu| *v += (x as f64 - mu).powi(2));
    }
    var.mapv_inplace(|v| v / n);
    (mean.mapv(|v| v as f32), var.mapv(|v| v as f32))
}

/// Monte-Carlo dropout prediction. Features before the dropout layer are
/// deterministic, so they are computed once and only the head is resampled.
pub fn mc_predict(
    x: &Array2<f32>,
    model: &SegModel<f32>,
    passes: usize,
    dropout_rate: f64,
    threshold: f32,
    seed: u64,
) -> Result<PredictionBundle> {
    ensure_arg!(passes >= 1, "need at least one pass, got {passes}");
    ensure_arg!(
        (0.0..=1.0).contains(&dropout_rate),
        "dropout rate must lie in [0, 1], got {dropout_rate}"
    );
    let features = model.features(&pixels_to_tensor(x))?;
    let pass_maps: Vec<Array2<f32>> = (0..passes)
        .into_par_iter()
        .map(|k| tensor_to_pixels(&model.head(&features, dropout_rate, Some(pass_seed(seed, k)))))
        .collect();
    let (mean_prob, variance) = mean_and_variance(&pass_maps);
    let mask = LabelMask::from_probabilities(&mean_prob, threshold, "", 0);
    Ok(PredictionBundle {
        mean_prob,
        variance,
        mask,
        passes,
        pass_maps,
    })
}

/// Scalar slice uncertainty and whether it had to fall back to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceUncertainty {
    pub value: f64,
    pub degenerate: bool,
}

/// Mean variance over the union of predicted and (if given) reference
/// foreground. An empty union yields 0 flagged as degenerate.
pub fn slice_uncertainty(bundle: &PredictionBundle, reference: Option<&LabelMask>) -> SliceUncertainty {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for ((idx, &v), &p) in bundle.variance.indexed_iter().zip(bundle.mask.pixels.iter()) {
        let r = reference.map_or(0, |m| m.pixels[idx]);
        if p == 1 || r == 1 {
            sum += v as f64;
            n += 1;
        }
    }
    if n == 0 {
        log::warn!("slice uncertainty over an empty foreground union; reporting 0");
        return SliceUncertainty {
            value: 0.0,
            degenerate: true,
        };
    }
    SliceUncertainty {
        value: sum / n as f64,
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seg::network::{seg_forward, SegConfig};

    fn model() -> SegModel<f32> {
        SegModel::new(
            SegConfig {
                depth: 2,
                base_channels: 4,
                ..Default::default()
            },
            1,
        )
        .unwrap()
    }

    fn input() -> Array2<f32> {
        Array2::from_shape_fn((16, 16), |(i, j)| ((i * 7 + j * 3) % 11) as f32 / 5.5 - 1.0)
    }

    #[test]
    fn single_pass_and_no_dropout_have_zero_variance() {
        let m = model();
        let b = mc_predict(&input(), &m, 1, 0.5, 0.5, 3).unwrap();
        assert!(b.variance.iter().all(|&v| v == 0.0));
        let b = mc_predict(&input(), &m, 10, 0.0, 0.5, 3).unwrap();
        assert!(b.variance.iter().all(|&v| v == 0.0));
        assert!(mc_predict(&input(), &m, 0, 0.5, 0.5, 3).is_err());
    }

    #[test]
    fn passes_match_independent_forwards_and_statistics_recompute() {
        let m = model();
        let b = mc_predict(&input(), &m, 6, m.config.dropout_rate, 0.5, 21).unwrap();
        for (k, map) in b.pass_maps.iter().enumerate() {
            assert_eq!(map, &seg_forward(&input(), &m, true, pass_seed(21, k)).unwrap());
        }
        // textbook two-pass recomputation
        for ((idx, &mu), &var) in b.mean_prob.indexed_iter().zip(b.variance.iter()) {
            let xs: Vec<f64> = b.pass_maps.iter().map(|m| m[idx] as f64).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
            assert!((mu as f64 - mean).abs() < 1e-6);
            assert!((var as f64 - v).abs() < 1e-6);
            assert!(var <= 0.25);
        }
        assert_eq!(b.mask.pixels, b.mean_prob.mapv(|p| u8::from(p > 0.5)));
        assert!(b.variance.iter().any(|&v| v > 0.0));
    }

    fn bundle_with(variance: Array2<f32>, mask: Array2<u8>) -> PredictionBundle {
        PredictionBundle {
            mean_prob: mask.mapv(f32::from),
            variance,
            mask: LabelMask::new(mask, "s", 0).unwrap(),
            passes: 2,
            pass_maps: Vec::new(),
        }
    }

    #[test]
    fn slice_uncertainty_reductions() {
        let mask = Array2::from_shape_fn((4, 4), |(i, _)| u8::from(i < 2));
        let u = slice_uncertainty(&bundle_with(Array2::zeros((4, 4)), mask.clone()), None);
        assert_eq!(u.value, 0.0);
        let u = slice_uncertainty(&bundle_with(Array2::from_elem((4, 4), 0.04), mask.clone()), None);
        assert!((u.value - 0.04).abs() < 1e-9);
        let var = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f32 * 0.001);
        let single = slice_uncertainty(&bundle_with(var.clone(), mask.clone()), None).value;
        let double = slice_uncertainty(&bundle_with(var.mapv(|v| v * 2.0), mask.clone()), None).value;
        assert!((double - 2.0 * single).abs() < 1e-12);
        // reference foreground widens the union
        let reference = LabelMask::new(Array2::from_shape_fn((4, 4), |(i, _)| u8::from(i == 3)), "s", 0).unwrap();
        let widened = slice_uncertainty(&bundle_with(var.clone(), mask), Some(&reference)).value;
        assert!(widened > single);
        let empty = slice_uncertainty(&bundle_with(var, Array2::zeros((4, 4))), None);
        assert!(empty.degenerate && empty.value == 0.0);
    }
}
