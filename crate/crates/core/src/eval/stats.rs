use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{ensure_arg, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(xs: &[f64]) -> Result<MeanStd> {
    ensure_arg!(!xs.is_empty(), "mean of an empty sample");
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(MeanStd { mean, std, n })
}

fn check_pairs(xs: &[f64], ys: &[f64], min: usize) -> Result<()> {
    ensure_arg!(
        xs.len() == ys.len(),
        "sample lengths differ: {} vs {}",
        xs.len(),
        ys.len()
    );
    ensure_arg!(xs.len() >= min, "need at least {min} pairs, got {}", xs.len());
    ensure_arg!(xs.iter().chain(ys).all(|v| v.is_finite()), "samples must be finite");
    Ok(())
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pairs(xs, ys, 3)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation undefined for a constant sample".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Average ranks, ties sharing the mean of their positions (1-based).
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pairs(xs, ys, 3)?;
    pearson(&ranks(xs), &ranks(ys))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub dof: usize,
    pub mean_difference: f64,
}

/// Two-sided paired t-test of `xs - ys`.
pub fn paired_ttest(xs: &[f64], ys: &[f64]) -> Result<TTest> {
    check_pairs(xs, ys, 2)?;
    let d: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    let s = mean_std(&d)?;
    if s.std == 0.0 {
        return Err(Error::Degenerate(
            "paired differences are constant; t statistic undefined".into(),
        ));
    }
    let dof = d.len() - 1;
    let t = s.mean / (s.std / (d.len() as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Degenerate(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest {
        t,
        p,
        dof,
        mean_difference: s.mean,
    })
}
