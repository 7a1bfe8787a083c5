use bridgeseg_tensor::{Bound, Element, Graph, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::nn::{self, ParamBuilder};

/// Time-conditional residual generator. Encoder: 7×7 stem and two
/// stride-2 convolutions; `n_res_blocks` residual blocks at 1/4 resolution,
/// each offset by a learned embedding of `t`; decoder: two nearest
/// upsampling stages and a 7×7 output convolution with `tanh`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub n_res_blocks: usize,
    pub time_features: usize,
    pub time_hidden: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            n_res_blocks: 4,
            time_features: 16,
            time_hidden: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.base_channels >= 1, "generator needs at least one channel");
        ensure_arg!(
            self.time_features >= 2 && self.time_features.is_multiple_of(2),
            "time_features must be even and >= 2"
        );
        ensure_arg!(self.time_hidden >= 1, "time_hidden must be >= 1");
        Ok(())
    }

    fn widest(&self) -> usize {
        4 * self.base_channels
    }
}

/// Generator output plus the encoder features used by the contrastive
/// regularizer.
pub struct GeneratorOutput<'g, T: Element> {
    pub image: Var<'g, T>,
    pub features: Vec<Var<'g, T>>,
}

#[derive(Clone, Debug)]
pub struct Generator<T: Element> {
    pub config: GeneratorConfig,
    pub params: ParamSet<T>,
}

impl<T: Element> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamBuilder::new(&mut rng);
        let c = config.base_channels;
        let w = config.widest();
        p.conv("stem", c, 1, 7);
        p.norm("stem.in", c);
        p.conv("down1", 2 * c, c, 3);
        p.norm("down1.in", 2 * c);
        p.conv("down2", w, 2 * c, 3);
        p.norm("down2.in", w);
        p.linear("temb", config.time_hidden, config.time_features);
        for i in 0..config.n_res_blocks {
            p.conv(&format!("res{i}.conv1"), w, w, 3);
            p.norm(&format!("res{i}.in1"), w);
            p.linear(&format!("res{i}.temb"), w, config.time_hidden);
            p.conv(&format!("res{i}.conv2"), w, w, 3);
            p.norm(&format!("res{i}.in2"), w);
        }
        p.conv("up1", 2 * c, w, 3);
        p.norm("up1.in", 2 * c);
        p.conv("up2", c, 2 * c, 3);
        p.norm("up2.in", c);
        p.conv("head", 1, c, 7);
        Ok(Self { config, params: p.set })
    }

    pub fn cast<U: Element>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Gradient-free forward pass on a `[1, H, W]` input.
    pub fn forward(&self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        check_input(x, "generator input")?;
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let out = generator_graph(&self.config, &b, g.constant(x.clone()), t);
        Ok(out.image.value().as_ref().clone())
    }
}

pub(crate) fn check_input<T: Element>(x: &Tensor<T>, what: &str) -> Result<()> {
    let (c, h, w) = x.chw()?;
    ensure_arg!(c == 1, "{what} must have one channel, got {c}");
    ensure_arg!(
        h % 4 == 0 && w % 4 == 0 && h > 0 && w > 0,
        "{what} height and width must be divisible by 4, got {h}×{w}"
    );
    if !x.is_finite() {
        return Err(Error::numeric(what));
    }
    Ok(())
}

/// Stem and downsampling path; time-independent, so it doubles as the
/// feature extractor for the contrastive regularizer.
pub(crate) fn encode<'g, T: Element>(b: &Bound<'g, '_, T>, x: Var<'g, T>) -> Vec<Var<'g, T>> {
    let f0 = nn::norm(b, "stem.in", nn::conv(b, "stem", x, 1, 3)).relu();
    let f1 = nn::norm(b, "down1.in", nn::conv(b, "down1", f0, 2, 1)).relu();
    let f2 = nn::norm(b, "down2.in", nn::conv(b, "down2", f1, 2, 1)).relu();
    vec![f0, f1, f2]
}

pub fn generator_graph<'g, T: Element>(
    config: &GeneratorConfig,
    b: &Bound<'g, '_, T>,
    x: Var<'g, T>,
    t: f64,
) -> GeneratorOutput<'g, T> {
    let g = b.graph();
    let features = encode(b, x);
    let temb = nn::linear(b, "temb", g.constant(nn::time_features(t, config.time_features))).leaky_relu(0.2);
    let mut h = features[2];
    for i in 0..config.n_res_blocks {
        let r = nn::norm(
            b,
            &format!("res{i}.in1"),
            nn::conv(b, &format!("res{i}.conv1"), h, 1, 1),
        )
        .relu();
        let r = r.add_channel(nn::linear(b, &format!("res{i}.temb"), temb));
        let r = nn::norm(
            b,
            &format!("res{i}.in2"),
            nn::conv(b, &format!("res{i}.conv2"), r, 1, 1),
        );
        h = h.add(r);
    }
    let h = nn::norm(b, "up1.in", nn::conv(b, "up1", h.upsample2(), 1, 1)).relu();
    let h = nn::norm(b, "up2.in", nn::conv(b, "up2", h.upsample2(), 1, 1)).relu();
    let image = nn::conv(b, "head", h, 1, 3).tanh();
    GeneratorOutput { image, features }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bridgeseg_tensor::normal;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 4,
            n_res_blocks: 2,
            ..Default::default()
        }
    }

    #[test]
    fn shape_and_bounds() {
        let gen = Generator::<f32>::new(small(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (h, w) in [(16, 16), (32, 16), (8, 12)] {
            let x = normal::<f32>(&[1, h, w], 0.5, &mut rng);
            let y = gen.forward(&x, 0.4).unwrap();
            assert_eq!(y.shape(), &[1, h, w]);
            assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn time_conditioning_matters() {
        let gen = Generator::<f32>::new(small(), 1).unwrap();
        let x = normal::<f32>(&[1, 16, 16], 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        let a = gen.forward(&x, 0.0).unwrap();
        let b = gen.forward(&x, 0.8).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let gen = Generator::<f32>::new(small(), 1).unwrap();
        let mut x = Tensor::<f32>::zeros(&[1, 16, 16]);
        x.data_mut()[5] = f32::NAN;
        assert!(matches!(gen.forward(&x, 0.0), Err(Error::Numeric { .. })));
        assert!(matches!(
            gen.forward(&Tensor::zeros(&[1, 10, 16]), 0.0),
            Err(Error::Argument(_))
        ));
    }
}
