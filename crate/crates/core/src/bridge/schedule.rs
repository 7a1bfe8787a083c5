use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use bridgeseg_tensor::{Element, Tensor};

use crate::error::{ensure_arg, Result};

/// Default bridge noise scale in normalized-intensity units.
pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_STEPS: usize = 5;

/// Discrete bridge times `0 = t_0 < … < t_N = 1` and the noise scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct TimeSchedule {
    times: Vec<f64>,
    tau: f64,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    times: Vec<f64>,
    tau: f64,
}

impl TryFrom<ScheduleRepr> for TimeSchedule {
    type Error = crate::error::Error;

    fn try_from(r: ScheduleRepr) -> Result<Self> {
        TimeSchedule::custom(r.times, r.tau)
    }
}

impl From<TimeSchedule> for ScheduleRepr {
    fn from(s: TimeSchedule) -> Self {
        Self {
            times: s.times,
            tau: s.tau,
        }
    }
}

impl TimeSchedule {
    /// `t_i = i / n`.
    pub fn uniform(n: usize, tau: f64) -> Result<Self> {
        ensure_arg!(n >= 1, "schedule needs N >= 1, got {n}");
        let times = (0..=n).map(|i| i as f64 / n as f64).collect();
        Self::custom(times, tau)
    }

    pub fn custom(times: Vec<f64>, tau: f64) -> Result<Self> {
        ensure_arg!(tau > 0.0 && tau.is_finite(), "tau must be positive, got {tau}");
        ensure_arg!(times.len() >= 2, "schedule needs at least the two endpoints");
        ensure_arg!(
            times[0] == 0.0 && times[times.len() - 1] == 1.0,
            "schedule must start at 0 and end at 1"
        );
        ensure_arg!(
            times.windows(2).all(|w| w[0] < w[1]),
            "schedule times must be strictly increasing"
        );
        Ok(Self { times, tau })
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    /// Fraction of the remaining way to `1` covered by step `i → i+1`, and
    /// the noise scale left at `t_i`.
    pub fn step(&self, i: usize) -> (f64, f64) {
        let (t, next) = (self.times[i], self.times[i + 1]);
        ((next - t) / (1.0 - t), self.tau * (1.0 - t))
    }
}

pub fn make_schedule(n: usize, tau: f64) -> Result<TimeSchedule> {
    TimeSchedule::uniform(n, tau)
}

impl Default for TimeSchedule {
    fn default() -> Self {
        Self::uniform(DEFAULT_STEPS, DEFAULT_TAU).expect("default schedule is valid")
    }
}

/// Weights of the transport and regularization terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SBLossWeights {
    pub lambda_sb: f64,
    pub lambda_reg: f64,
}

impl SBLossWeights {
    pub fn new(lambda_sb: f64, lambda_reg: f64) -> Result<Self> {
        ensure_arg!(
            lambda_sb >= 0.0 && lambda_reg >= 0.0,
            "loss weights must be non-negative, got ({lambda_sb}, {lambda_reg})"
        );
        Ok(Self { lambda_sb, lambda_reg })
    }
}

impl Default for SBLossWeights {
    fn default() -> Self {
        Self {
            lambda_sb: 1.0,
            lambda_reg: 1.0,
        }
    }
}

/// `(1-t)·x0 + t·x1 + sqrt(tau·t·(1-t))·ε`, drawing ε from `rng`.
pub(crate) fn bridge_step<T: Element>(
    x0: &Tensor<T>,
    x1: &Tensor<T>,
    t: f64,
    tau: f64,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let sd = (tau * t * (1.0 - t)).sqrt();
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(&a, &b)| {
            let e: f64 = rng.sample(StandardNormal);
            T::lit((1.0 - t) * a.f64() + t * b.f64() + sd * e)
        })
        .collect();
    Tensor::new(x0.shape(), data).expect("bridge shape")
}

/// One draw of the Brownian bridge between `x0` and `x1_hat` at time `t`.
pub fn sample_bridge(x0: &Array2<f32>, x1_hat: &Array2<f32>, t: f64, tau: f64, seed: u64) -> Result<Array2<f32>> {
    ensure_arg!(
        x0.dim() == x1_hat.dim(),
        "bridge endpoints differ in shape: {:?} vs {:?}",
        x0.dim(),
        x1_hat.dim()
    );
    ensure_arg!((0.0..=1.0).contains(&t), "bridge time must lie in [0, 1], got {t}");
    ensure_arg!(tau >= 0.0, "tau must be non-negative, got {tau}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = (tau * t * (1.0 - t)).sqrt();
    let mut out = x0.clone();
    for (o, &b) in out.iter_mut().zip(x1_hat.iter()) {
        let e: f64 = rng.sample(StandardNormal);
        *o = ((1.0 - t) * *o as f64 + t * b as f64 + sd * e) as f32;
    }
    Ok(out)
}
