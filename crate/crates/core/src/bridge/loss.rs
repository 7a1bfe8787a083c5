use bridgeseg_tensor::{Bound, Element, Graph, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::discriminator::{discriminator_graph, DiscriminatorConfig};
use crate::bridge::generator::{check_input, encode, generator_graph, Generator, GeneratorConfig};
use crate::bridge::schedule::{SBLossWeights, TimeSchedule};
use crate::bridge::translate::run_chain;
use crate::error::{ensure_arg, Error, Result};

/// Patches sampled per feature layer by the contrastive regularizer.
pub const NCE_PATCHES: usize = 64;
pub const NCE_TEMPERATURE: f64 = 0.07;

/// Everything a translation step treats as constant: the source slice, the
/// bridge state `x_t` reached by the gradient-free chain, the source's
/// encoder features and the sampled patch positions.
#[derive(Clone, Debug)]
pub struct BridgeContext<T: Element> {
    pub source: Tensor<T>,
    pub x_t: Tensor<T>,
    pub t_index: usize,
    pub source_features: Vec<Tensor<T>>,
    pub positions: Vec<Vec<usize>>,
}

impl<T: Element> BridgeContext<T> {
    pub fn prepare(
        generator: &Generator<T>,
        schedule: &TimeSchedule,
        source: &Tensor<T>,
        t_index: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        ensure_arg!(
            t_index < schedule.steps(),
            "t_index {t_index} out of range for a {}-step schedule",
            schedule.steps()
        );
        check_input(source, "source slice")?;
        let x_t = run_chain(generator, schedule, source, t_index, rng)?;
        let g = Graph::new();
        let b = generator.params.bind(&g, false);
        let source_features: Vec<Tensor<T>> = encode(&b, g.constant(source.clone()))
            .into_iter()
            .map(|f| f.value().as_ref().clone())
            .collect();
        let positions = source_features
            .iter()
            .map(|f| {
                let hw = f.shape()[1] * f.shape()[2];
                let mut idx = sample(rng, hw, NCE_PATCHES.min(hw)).into_vec();
                idx.sort_unstable();
                idx
            })
            .collect();
        Ok(Self {
            source: source.clone(),
            x_t,
            t_index,
            source_features,
            positions,
        })
    }
}

/// Scalar loss terms as logged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub adv: f64,
    pub sb: f64,
    pub reg: f64,
    pub total: f64,
}

/// Graph nodes of one translation loss evaluation.
pub struct UnsbTerms<'g, T: Element> {
    pub total: Var<'g, T>,
    pub adv: Var<'g, T>,
    pub sb: Var<'g, T>,
    pub reg: Var<'g, T>,
    /// Predicted endpoint `x̂_1`.
    pub endpoint: Var<'g, T>,
}

impl<T: Element> UnsbTerms<'_, T> {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            adv: self.adv.item().f64(),
            sb: self.sb.item().f64(),
            reg: self.reg.item().f64(),
            total: self.total.item().f64(),
        }
    }
}

/// Generator objective at step `t_index`: least-squares adversarial term,
/// `(1 - t)`-scaled transport cost to `x_t`, and patch contrastive
/// regularizer between source and endpoint encoder features.
pub fn unsb_loss<'g, T: Element>(
    gen_config: &GeneratorConfig,
    gen: &Bound<'g, '_, T>,
    disc_config: &DiscriminatorConfig,
    disc: &Bound<'g, '_, T>,
    ctx: &BridgeContext<T>,
    schedule: &TimeSchedule,
    weights: SBLossWeights,
) -> Result<UnsbTerms<'g, T>> {
    ensure_arg!(
        ctx.t_index < schedule.steps(),
        "t_index {} out of range for a {}-step schedule",
        ctx.t_index,
        schedule.steps()
    );
    let g = gen.graph();
    let t = schedule.time(ctx.t_index);
    let x_t = g.constant(ctx.x_t.clone());
    let endpoint = generator_graph(gen_config, gen, x_t, t).image;

    let adv = discriminator_graph(disc_config, disc, endpoint, t).mean_sq_dev(1.0);
    let sb = endpoint.mse(x_t).scale(1.0 - t);
    let queries = encode(gen, endpoint);
    let mut reg: Option<Var<'g, T>> = None;
    for ((q, k), pos) in queries.iter().zip(&ctx.source_features).zip(&ctx.positions) {
        let term = q.patch_nce(g.constant(k.clone()), pos, NCE_TEMPERATURE);
        reg = Some(match reg {
            Some(r) => r.add(term),
            None => term,
        });
    }
    let reg = reg.expect("encoder yields features").scale(1.0 / queries.len() as f64);
    let total = adv.add(sb.scale(weights.lambda_sb)).add(reg.scale(weights.lambda_reg));

    for (name, v) in [("adv", adv), ("sb", sb), ("reg", reg), ("total", total)] {
        if !v.item().is_finite() {
            return Err(Error::numeric(format!("unsb_loss.{name}")));
        }
    }
    Ok(UnsbTerms {
        total,
        adv,
        sb,
        reg,
        endpoint,
    })
}

/// Least-squares discriminator objective on one real and one generated slice.
pub fn discriminator_loss<'g, T: Element>(
    config: &DiscriminatorConfig,
    disc: &Bound<'g, '_, T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    t: f64,
) -> Result<Var<'g, T>> {
    let g = disc.graph();
    let real_term = discriminator_graph(config, disc, g.constant(real.clone()), t).mean_sq_dev(1.0);
    let fake_term = discriminator_graph(config, disc, g.constant(fake.clone()), t).mean_sq_dev(0.0);
    let loss = real_term.add(fake_term).scale(0.5);
    if !loss.item().is_finite() {
        return Err(Error::numeric("discriminator_loss"));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::discriminator::Discriminator;
    use bridgeseg_tensor::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        gen: Generator<f32>,
        disc: Discriminator<f32>,
        schedule: TimeSchedule,
        ctx: BridgeContext<f32>,
    }

    fn fixture(t_index: usize) -> Fixture {
        let gen = Generator::new(
            GeneratorConfig {
                base_channels: 4,
                n_res_blocks: 1,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let disc = Discriminator::new(
            DiscriminatorConfig {
                base_channels: 4,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let schedule = TimeSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = normal::<f32>(&[1, 16, 16], 0.5, &mut rng);
        let ctx = BridgeContext::prepare(&gen, &schedule, &src, t_index, &mut rng).unwrap();
        Fixture {
            gen,
            disc,
            schedule,
            ctx,
        }
    }

    fn components(f: &Fixture, weights: SBLossWeights) -> LossComponents {
        let g = Graph::new();
        let gb = f.gen.params.bind(&g, true);
        let db = f.disc.params.bind(&g, false);
        unsb_loss(&f.gen.config, &gb, &f.disc.config, &db, &f.ctx, &f.schedule, weights)
            .unwrap()
            .components()
    }

    #[test]
    fn components_are_non_negative_and_total_is_weighted_sum() {
        let f = fixture(2);
        let c = components(&f, SBLossWeights::new(0.5, 2.0).unwrap());
        assert!(c.adv >= 0.0 && c.sb >= 0.0 && c.reg >= 0.0);
        let expect = (c.adv as f32 + c.sb as f32 * 0.5) + c.reg as f32 * 2.0;
        assert_eq!(c.total as f32, expect);
    }

    #[test]
    fn zero_weights_leave_adversarial_term() {
        let f = fixture(1);
        let c = components(&f, SBLossWeights::new(0.0, 0.0).unwrap());
        assert_eq!(c.total, c.adv);
    }

    #[test]
    fn lambda_linearity() {
        let f = fixture(3);
        let base = components(&f, SBLossWeights::new(0.0, 0.0).unwrap());
        for l_sb in [0.0f32, 1.0, 2.0] {
            for l_reg in [0.0f32, 1.0, 2.0] {
                let c = components(&f, SBLossWeights::new(l_sb as f64, l_reg as f64).unwrap());
                assert_eq!((c.adv, c.sb, c.reg), (base.adv, base.sb, base.reg));
                let (adv, sb, reg) = (c.adv as f32, c.sb as f32, c.reg as f32);
                assert_eq!(c.total as f32, (adv + sb * l_sb) + reg * l_reg);
            }
        }
    }

    #[test]
    fn t_index_must_be_a_step() {
        let f = fixture(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(BridgeContext::prepare(&f.gen, &f.schedule, &f.ctx.source, 5, &mut rng).is_err());
    }

    #[test]
    fn discriminator_loss_is_finite() {
        let f = fixture(0);
        let g = Graph::new();
        let db = f.disc.params.bind(&g, true);
        let fake = f.gen.forward(&f.ctx.x_t, 0.0).unwrap();
        let l = discriminator_loss(&f.disc.config, &db, &f.ctx.source, &fake, 0.0).unwrap();
        assert!(l.item().is_finite() && l.item() >= 0.0);
    }
}
