use bridgeseg_tensor::{Bound, Element, Graph, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::generator::check_input;
use crate::error::{ensure_arg, Result};
use crate::nn::{self, ParamBuilder};

/// Score maps are `DOWNSAMPLING`× smaller than the input on each side.
pub const DOWNSAMPLING: usize = 4;

/// Time-conditional patch discriminator shared across all bridge steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub time_features: usize,
    /// Instance normalization after the inner convolutions.
    pub instance_norm: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            time_features: 16,
            instance_norm: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Element> {
    pub config: DiscriminatorConfig,
    pub params: ParamSet<T>,
}

impl<T: Element> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        ensure_arg!(config.base_channels >= 1, "discriminator needs at least one channel");
        ensure_arg!(
            config.time_features >= 2 && config.time_features.is_multiple_of(2),
            "time_features must be even and >= 2"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamBuilder::new(&mut rng);
        let c = config.base_channels;
        p.conv("d1", c, 1, 3);
        p.conv("d2", 2 * c, c, 3);
        if config.instance_norm {
            p.norm("d2.in", 2 * c);
        }
        p.linear("temb", 2 * c, config.time_features);
        p.conv("d3", 4 * c, 2 * c, 3);
        if config.instance_norm {
            p.norm("d3.in", 4 * c);
        }
        p.conv("score", 1, 4 * c, 3);
        Ok(Self { config, params: p.set })
    }

    pub fn cast<U: Element>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Gradient-free patch scores, `[1, H/4, W/4]`.
    pub fn forward(&self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        check_input(x, "discriminator input")?;
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let s = discriminator_graph(&self.config, &b, g.constant(x.clone()), t);
        Ok(s.value().as_ref().clone())
    }
}

pub fn discriminator_graph<'g, T: Element>(
    config: &DiscriminatorConfig,
    b: &Bound<'g, '_, T>,
    x: Var<'g, T>,
    t: f64,
) -> Var<'g, T> {
    let g = b.graph();
    let h = nn::conv(b, "d1", x, 2, 1).leaky_relu(0.2);
    let in_norm = |name: &str, x: Var<'g, T>| if config.instance_norm { nn::norm(b, name, x) } else { x };
    let h = in_norm("d2.in", nn::conv(b, "d2", h, 2, 1));
    let temb = nn::linear(b, "temb", g.constant(nn::time_features(t, config.time_features)));
    let h = h.add_channel(temb).leaky_relu(0.2);
    let h = in_norm("d3.in", nn::conv(b, "d3", h, 1, 1)).leaky_relu(0.2);
    nn::conv(b, "score", h, 1, 1)
}
