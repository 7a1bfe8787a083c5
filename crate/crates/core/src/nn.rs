//! Parameter construction and layer helpers shared by every network.

use bridgeseg_tensor::{he_normal, Bound, Element, ParamSet, Tensor, Var};
use rand::Rng;

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Builds a named parameter set with a single seeded stream.
pub(crate) struct ParamBuilder<'r, T: Element, R: Rng> {
    pub set: ParamSet<T>,
    rng: &'r mut R,
}

impl<'r, T: Element, R: Rng> ParamBuilder<'r, T, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            set: ParamSet::new(),
            rng,
        }
    }

    pub fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) {
        self.set
            .insert(format!("{name}.w"), he_normal(&[c_out, c_in, k, k], self.rng));
        self.set.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
    }

    pub fn norm(&mut self, name: &str, c: usize) {
        self.set.insert(format!("{name}.g"), Tensor::full(&[c], T::one()));
        self.set.insert(format!("{name}.b"), Tensor::zeros(&[c]));
    }

    pub fn linear(&mut self, name: &str, n: usize, k: usize) {
        self.set.insert(format!("{name}.w"), he_normal(&[n, k], self.rng));
        self.set.insert(format!("{name}.b"), Tensor::zeros(&[n]));
    }
}

pub(crate) fn conv<'g, T: Element>(
    b: &Bound<'g, '_, T>,
    name: &str,
    x: Var<'g, T>,
    stride: usize,
    pad: usize,
) -> Var<'g, T> {
    x.conv2d(
        b.var(&format!("{name}.w")),
        Some(b.var(&format!("{name}.b"))),
        stride,
        pad,
    )
}

pub(crate) fn norm<'g, T: Element>(b: &Bound<'g, '_, T>, name: &str, x: Var<'g, T>) -> Var<'g, T> {
    x.instance_norm(b.var(&format!("{name}.g")), b.var(&format!("{name}.b")), NORM_EPS)
}

pub(crate) fn linear<'g, T: Element>(b: &Bound<'g, '_, T>, name: &str, x: Var<'g, T>) -> Var<'g, T> {
    x.linear(b.var(&format!("{name}.w")), b.var(&format!("{name}.b")))
}

/// Sinusoidal features of a time in `[0, 1]`.
pub(crate) fn time_features<T: Element>(t: f64, dims: usize) -> Tensor<T> {
    let half = dims / 2;
    let mut out = Vec::with_capacity(dims);
    for k in 0..half {
        let freq = std::f64::consts::PI * (1u64 << k) as f64;
        out.push(T::lit((freq * t).sin()));
        out.push(T::lit((freq * t).cos()));
    }
    Tensor::new(&[dims], out).expect("time feature length")
}
