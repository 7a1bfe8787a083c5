use bridgeseg_tensor::{Bound, Element, Graph, ParamSet, Tensor, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::image::{pixels_to_tensor, tensor_to_pixels};
use crate::nn::{self, ParamBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegArch {
    #[serde(rename = "R2AUNET")]
    R2AUNet,
    #[serde(rename = "UNET")]
    UNet,
}

/// How skip connections are gated in the recurrent-residual network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attention {
    Gated,
    Off,
    /// Coefficients pinned to 1.
    ForcedOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub arch: SegArch,
    /// Number of 2× poolings; inputs must be divisible by `2^depth`.
    pub depth: usize,
    pub base_channels: usize,
    /// Convolutions per recurrent unit (R2AUNet only).
    pub recurrence_steps: usize,
    pub residual: bool,
    pub attention: Attention,
    pub dropout_rate: f64,
    pub fg_weight: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            arch: SegArch::R2AUNet,
            depth: 4,
            base_channels: 16,
            recurrence_steps: 2,
            residual: true,
            attention: Attention::Gated,
            dropout_rate: 0.5,
            fg_weight: 30.0,
        }
    }
}

impl SegConfig {
    pub fn unet() -> Self {
        Self {
            arch: SegArch::UNet,
            recurrence_steps: 1,
            residual: false,
            attention: Attention::Off,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.depth >= 1, "segmentation depth must be >= 1");
        ensure_arg!(self.base_channels >= 1, "segmentation needs at least one channel");
        ensure_arg!(self.recurrence_steps >= 1, "recurrence_steps must be >= 1");
        ensure_arg!(
            (0.0..=1.0).contains(&self.dropout_rate),
            "dropout rate must lie in [0, 1], got {}",
            self.dropout_rate
        );
        ensure_arg!(
            self.fg_weight > 0.0,
            "fg_weight must be positive, got {}",
            self.fg_weight
        );
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn has_projection(&self) -> bool {
        self.arch == SegArch::R2AUNet && (self.residual || self.recurrence_steps > 1)
    }

    fn gated(&self) -> bool {
        self.arch == SegArch::R2AUNet && self.attention == Attention::Gated
    }

    pub fn divisor(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Debug)]
pub struct SegModel<T: Element> {
    pub config: SegConfig,
    pub params: ParamSet<T>,
}

impl<T: Element> SegModel<T> {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamBuilder::new(&mut rng);
        let block = |p: &mut ParamBuilder<T, ChaCha8Rng>, name: &str, c_in: usize, c_out: usize| {
            let unit_in = if config.has_projection() {
                p.conv(&format!("{name}.proj"), c_out, c_in, 1);
                c_out
            } else {
                c_in
            };
            p.conv(&format!("{name}.u1.conv"), c_out, unit_in, 3);
            p.norm(&format!("{name}.u1.in"), c_out);
            p.conv(&format!("{name}.u2.conv"), c_out, c_out, 3);
            p.norm(&format!("{name}.u2.in"), c_out);
        };
        let mut c_in = 1;
        for l in 0..=config.depth {
            block(&mut p, &format!("enc{l}"), c_in, config.channels(l));
            c_in = config.channels(l);
        }
        for l in (0..config.depth).rev() {
            let c = config.channels(l);
            p.conv(&format!("up{l}.conv"), c, config.channels(l + 1), 3);
            p.norm(&format!("up{l}.in"), c);
            if config.gated() {
                let inter = (c / 2).max(1);
                p.conv(&format!("att{l}.wg"), inter, c, 1);
                p.conv(&format!("att{l}.wx"), inter, c, 1);
                p.conv(&format!("att{l}.psi"), 1, inter, 1);
            }
            block(&mut p, &format!("dec{l}"), 2 * c, c);
        }
        p.conv("head", 1, config.base_channels, 1);
        Ok(Self { config, params: p.set })
    }

    pub fn cast<U: Element>(&self) -> SegModel<U> {
        SegModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (c, h, w) = x.chw()?;
        ensure_arg!(c == 1, "segmentation input must have one channel, got {c}");
        let d = self.config.divisor();
        ensure_arg!(
            h > 0 && w > 0 && h % d == 0 && w % d == 0,
            "segmentation input {h}×{w} must be divisible by {d} (2^depth, depth {})",
            self.config.depth
        );
        if !x.is_finite() {
            return Err(Error::numeric("segmentation input"));
        }
        Ok(())
    }

    /// Decoder output before dropout and the final convolution.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let f = features_graph(&self.config, &b, g.constant(x.clone()));
        Ok(f.value().as_ref().clone())
    }

    /// Probability map from precomputed features; `dropout_seed` activates
    /// dropout at `rate`.
    pub fn head(&self, features: &Tensor<T>, rate: f64, dropout_seed: Option<u64>) -> Tensor<T> {
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let mask = dropout_seed.map(|s| dropout_mask(features.shape(), rate, s));
        let p = head_graph(&b, g.constant(features.clone()), mask.as_ref());
        p.value().as_ref().clone()
    }
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<T: Element>(shape: &[usize], rate: f64, seed: u64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    if rate <= 0.0 {
        return Tensor::full(shape, T::one());
    }
    if rate >= 1.0 {
        return Tensor::zeros(shape);
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    Tensor::new(shape, data).expect("mask shape")
}

fn conv_unit<'g, T: Element>(b: &Bound<'g, '_, T>, name: &str, x: Var<'g, T>) -> Var<'g, T> {
    nn::norm(b, &format!("{name}.in"), nn::conv(b, &format!("{name}.conv"), x, 1, 1)).relu()
}

fn double_conv<'g, T: Element>(b: &Bound<'g, '_, T>, name: &str, x: Var<'g, T>) -> Var<'g, T> {
    let h = conv_unit(b, &format!("{name}.u1"), x);
    conv_unit(b, &format!("{name}.u2"), h)
}

/// Recurrent unit: the same convolution applied `steps` times, each time to
/// the block input plus the previous state.
fn recurrent_unit<'g, T: Element>(b: &Bound<'g, '_, T>, name: &str, x: Var<'g, T>, steps: usize) -> Var<'g, T> {
    let mut h = conv_unit(b, name, x);
    for _ in 1..steps {
        h = conv_unit(b, name, x.add(h));
    }
    h
}

fn rrcnn_block<'g, T: Element>(config: &SegConfig, b: &Bound<'g, '_, T>, name: &str, x: Var<'g, T>) -> Var<'g, T> {
    let x = if config.has_projection() {
        nn::conv(b, &format!("{name}.proj"), x, 1, 0)
    } else {
        x
    };
    let h = recurrent_unit(b, &format!("{name}.u1"), x, config.recurrence_steps);
    let h = recurrent_unit(b, &format!("{name}.u2"), h, config.recurrence_steps);
    if config.residual {
        x.add(h)
    } else {
        h
    }
}

fn block<'g, T: Element>(config: &SegConfig, b: &Bound<'g, '_, T>, name: &str, x: Var<'g, T>) -> Var<'g, T> {
    match config.arch {
        SegArch::UNet => double_conv(b, name, x),
        SegArch::R2AUNet => rrcnn_block(config, b, name, x),
    }
}

/// Additive attention gate; returns the skip features scaled by
/// coefficients in `[0, 1]`.
fn attention_gate<'g, T: Element>(
    config: &SegConfig,
    b: &Bound<'g, '_, T>,
    level: usize,
    gate: Var<'g, T>,
    skip: Var<'g, T>,
) -> Var<'g, T> {
    match (config.arch, config.attention) {
        (SegArch::UNet, _) | (_, Attention::Off) => skip,
        (_, Attention::ForcedOne) => {
            let s = skip.shape();
            let ones = b.graph().constant(Tensor::full(&[1, s[1], s[2]], T::one()));
            skip.mul_spatial(ones)
        }
        (_, Attention::Gated) => {
            let coeff = attention_coefficients(b, level, gate, skip);
            skip.mul_spatial(coeff)
        }
    }
}

fn attention_coefficients<'g, T: Element>(
    b: &Bound<'g, '_, T>,
    level: usize,
    gate: Var<'g, T>,
    skip: Var<'g, T>,
) -> Var<'g, T> {
    let g1 = nn::conv(b, &format!("att{level}.wg"), gate, 1, 0);
    let x1 = nn::conv(b, &format!("att{level}.wx"), skip, 1, 0);
    nn::conv(b, &format!("att{level}.psi"), g1.add(x1).relu(), 1, 0).sigmoid()
}

pub fn features_graph<'g, T: Element>(config: &SegConfig, b: &Bound<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
    let mut skips = Vec::with_capacity(config.depth);
    let mut h = x;
    for l in 0..config.depth {
        h = block(config, b, &format!("enc{l}"), h);
        skips.push(h);
        h = h.max_pool2();
    }
    h = block(config, b, &format!("enc{}", config.depth), h);
    for l in (0..config.depth).rev() {
        let up = conv_unit(b, &format!("up{l}"), h.upsample2());
        let skip = attention_gate(config, b, l, up, skips[l]);
        h = block(config, b, &format!("dec{l}"), skip.concat_channels(up));
    }
    h
}

pub fn head_graph<'g, T: Element>(
    b: &Bound<'g, '_, T>,
    features: Var<'g, T>,
    dropout: Option<&Tensor<T>>,
) -> Var<'g, T> {
    let h = match dropout {
        Some(mask) => features.mul_const(mask),
        None => features,
    };
    nn::conv(b, "head", h, 1, 0).sigmoid()
}

/// Full network on the graph; `dropout` is a mask from [`dropout_mask`].
pub fn seg_graph<'g, T: Element>(
    config: &SegConfig,
    b: &Bound<'g, '_, T>,
    x: Var<'g, T>,
    dropout: Option<&Tensor<T>>,
) -> Var<'g, T> {
    head_graph(b, features_graph(config, b, x), dropout)
}

/// Probability map of one slice. With `dropout_active` the dropout mask is
/// drawn from `seed` at the configured rate.
pub fn seg_forward(x: &Array2<f32>, model: &SegModel<f32>, dropout_active: bool, seed: u64) -> Result<Array2<f32>> {
    let x = pixels_to_tensor::<f32>(x);
    let features = model.features(&x)?;
    let rate = model.config.dropout_rate;
    let p = model.head(&features, rate, dropout_active.then_some(seed));
    Ok(tensor_to_pixels(&p))
}
