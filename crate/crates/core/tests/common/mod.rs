//! Finite-difference gradient checks shared by the gradient and acceptance
//! targets.
#![allow(dead_code)]

use bridgeseg::bridge::{
    unsb_loss, BridgeContext, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, SBLossWeights,
    TimeSchedule,
};
use bridgeseg::seg::EPS;
use bridgeseg_tensor::finite_diff::{central_difference, relative_error};
use bridgeseg_tensor::{Graph, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
/// Below this magnitude gradients are compared by absolute gap.
pub const FLOOR: f64 = 1e-4;
/// Parameter elements probed per loss instance.
pub const PROBES: usize = 24;

pub const SIDES: [usize; 3] = [8, 12, 16];

fn uniform_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..h * w).map(|_| rng.gen_range(-0.95..0.95)).collect();
    Tensor::new(&[1, h, w], data).unwrap()
}

/// Largest relative error of the generator-parameter gradient of the
/// translation loss, over `PROBES` random elements, with the bridge context
/// held fixed.
pub fn unsb_instance_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = SIDES[rng.gen_range(0..SIDES.len())];
    let w = SIDES[rng.gen_range(0..SIDES.len())];
    let gen_cfg = GeneratorConfig {
        base_channels: 2,
        n_res_blocks: 1,
        time_features: 4,
        time_hidden: 4,
    };
    let disc_cfg = DiscriminatorConfig {
        base_channels: 2,
        time_features: 4,
        ..Default::default()
    };
    let generator = Generator::<f64>::new(gen_cfg.clone(), rng.gen()).unwrap();
    let disc = Discriminator::<f64>::new(disc_cfg.clone(), rng.gen()).unwrap();
    let schedule = TimeSchedule::uniform(4, 0.01).unwrap();
    let weights = SBLossWeights::new(rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)).unwrap();
    let source = uniform_image(h, w, &mut rng);
    let t_index = rng.gen_range(0..schedule.steps());
    let ctx = BridgeContext::prepare(&generator, &schedule, &source, t_index, &mut rng).unwrap();

    let loss_of = |ps: &ParamSet<f64>| {
        let g = Graph::new();
        let gb = ps.bind(&g, false);
        let db = disc.params.bind(&g, false);
        unsb_loss(&gen_cfg, &gb, &disc_cfg, &db, &ctx, &schedule, weights)
            .unwrap()
            .total
            .item()
    };
    let g = Graph::new();
    let gb = generator.params.bind(&g, true);
    let db = disc.params.bind(&g, false);
    let total = unsb_loss(&gen_cfg, &gb, &disc_cfg, &db, &ctx, &schedule, weights)
        .unwrap()
        .total;
    let mut grads = g.backward(total);
    let analytic = gb.grads(&mut grads);
    drop(gb);
    max_probe_error(&generator.params, &analytic, &mut rng, loss_of)
}

fn max_probe_error(
    params: &ParamSet<f64>,
    analytic: &bridgeseg_tensor::ParamGrads<f64>,
    rng: &mut ChaCha8Rng,
    loss_of: impl Fn(&ParamSet<f64>) -> f64,
) -> f64 {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for _ in 0..PROBES {
        let pi = rng.gen_range(0..names.len());
        let name = &names[pi];
        let shape = params.get(name).unwrap().shape().to_vec();
        let mut flat = params.get(name).unwrap().data().to_vec();
        let i = rng.gen_range(0..flat.len());
        let numeric = central_difference(&mut flat, i, STEP, |x| {
            let mut ps = params.clone();
            *ps.get_mut(name).unwrap() = Tensor::new(&shape, x.to_vec()).unwrap();
            loss_of(&ps)
        });
        let a = analytic.get(pi).map(|t| t.data()[i]).unwrap_or(0.0);
        worst = worst.max(relative_error(a, numeric, FLOOR));
    }
    worst
}

#[allow(clippy::needless_range_loop)]
/// Largest relative error of the segmentation loss gradient with respect to
/// the probability map, over every pixel.
pub fn weighted_ce_instance_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = SIDES[rng.gen_range(0..SIDES.len())];
    let w = SIDES[rng.gen_range(0..SIDES.len())];
    let fg_weight = rng.gen_range(1.0..40.0);
    let target: Vec<f64> = (0..h * w).map(|_| f64::from(u8::from(rng.gen_bool(0.2)))).collect();
    let mut prob: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.02..0.98)).collect();

    let loss_of = |p: &[f64]| {
        let g = Graph::new();
        g.constant(Tensor::new(&[1, h, w], p.to_vec()).unwrap())
            .weighted_bce(&target, fg_weight, EPS)
            .item()
    };
    let mut ps = ParamSet::new();
    ps.insert("prob", Tensor::new(&[1, h, w], prob.clone()).unwrap());
    let g = Graph::new();
    let b = ps.bind(&g, true);
    let loss = b.var("prob").weighted_bce(&target, fg_weight, EPS);
    let mut grads = g.backward(loss);
    let analytic = b.grads(&mut grads).get(0).unwrap().data().to_vec();
    let mut worst = 0.0f64;
    for i in 0..prob.len() {
        let numeric = central_difference(&mut prob, i, STEP, loss_of);
        worst = worst.max(relative_error(analytic[i], numeric, FLOOR));
    }
    worst
}

/// SSIM by explicit two-pass window statistics, no separable filtering.
#[allow(clippy::needless_range_loop)]
pub fn ssim_oracle(x: &ndarray::Array2<f32>, y: &ndarray::Array2<f32>) -> f64 {
    let (h, w) = x.dim();
    let sigma: f64 = 1.5;
    let mut wts = [[0.0f64; 7]; 7];
    let mut total = 0.0;
    for (i, row) in wts.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut acc, mut count) = (0.0, 0);
    for y0 in 0..=h - 7 {
        for x0 in 0..=w - 7 {
            let px = |m: &ndarray::Array2<f32>, i: usize, j: usize| (m[[y0 + i, x0 + j]] as f64 + 1.0) / 2.0;
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..7 {
                for j in 0..7 {
                    mx += wts[i][j] / total * px(x, i, j);
                    my += wts[i][j] / total * px(y, i, j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..7 {
                for j in 0..7 {
                    let wt = wts[i][j] / total;
                    let (a, b) = (px(x, i, j) - mx, px(y, i, j) - my);
                    vx += wt * a * a;
                    vy += wt * b * b;
                    cxy += wt * a * b;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}
