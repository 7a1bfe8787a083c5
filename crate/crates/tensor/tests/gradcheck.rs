//! Every backward rule against central finite differences in f64.

use bridgeseg_tensor::finite_diff::{central_difference, relative_error};
use bridgeseg_tensor::{normal, Graph, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

/// Checks d/dθ of `sum(f(params) ⊙ probe)` for every parameter element.
fn check(params: ParamSet<f64>, f: impl for<'g> Fn(&bridgeseg_tensor::Bound<'g, '_, f64>) -> Var<'g, f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let g = Graph::new();
        let b = params.bind(&g, false);
        let out = f(&b);
        normal::<f64>(&out.shape(), 1.0, &mut rng)
    };
    let loss_of = |ps: &ParamSet<f64>| {
        let g = Graph::new();
        let b = ps.bind(&g, false);
        let out = f(&b).mul_const(&probe).sum();
        out.item()
    };
    let g = Graph::new();
    let b = params.bind(&g, true);
    let loss = f(&b).mul_const(&probe).sum();
    let mut grads = g.backward(loss);
    let analytic = b.grads(&mut grads);
    drop(b);

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for (pi, name) in names.iter().enumerate() {
        let shape = params.get(name).unwrap().shape().to_vec();
        let mut flat = params.get(name).unwrap().data().to_vec();
        for i in 0..flat.len() {
            let numeric = central_difference(&mut flat, i, H, |x| {
                let mut ps = params.clone();
                *ps.get_mut(name).unwrap() = Tensor::new(&shape, x.to_vec()).unwrap();
                loss_of(&ps)
            });
            let a = analytic.get(pi).map(|t| t.data()[i]).unwrap_or(0.0);
            let err = relative_error(a, numeric, 1e-3);
            assert!(err < TOL, "{name}[{i}]: analytic {a} vs numeric {numeric} (err {err})");
        }
    }
}

fn rand_set(entries: &[(&str, &[usize])], seed: u64) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    for (name, shape) in entries {
        ps.insert(*name, normal(shape, 1.0, &mut rng));
    }
    ps
}

#[test]
fn conv2d_all_geometries() {
    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
        let ps = rand_set(&[("x", &[2, 6, 6]), ("w", &[3, 2, k, k]), ("b", &[3])], k as u64);
        check(ps, |b| b.var("x").conv2d(b.var("w"), Some(b.var("b")), s, p));
    }
}

#[test]
fn instance_norm() {
    let ps = rand_set(&[("x", &[3, 4, 4]), ("g", &[3]), ("b", &[3])], 1);
    check(ps, |b| b.var("x").instance_norm(b.var("g"), b.var("b"), 1e-5));
}

#[test]
fn pooling_upsampling_and_activations() {
    let ps = rand_set(&[("x", &[2, 4, 4])], 2);
    check(ps.clone(), |b| b.var("x").max_pool2());
    check(ps.clone(), |b| b.var("x").upsample2());
    check(ps.clone(), |b| b.var("x").sigmoid());
    check(ps.clone(), |b| b.var("x").tanh());
    check(ps, |b| b.var("x").leaky_relu(0.2));
}

#[test]
fn broadcasts_and_concat() {
    let ps = rand_set(
        &[("x", &[2, 3, 3]), ("v", &[2]), ("m", &[1, 3, 3]), ("y", &[1, 3, 3])],
        3,
    );
    check(ps, |b| {
        b.var("x")
            .add_channel(b.var("v"))
            .mul_spatial(b.var("m"))
            .concat_channels(b.var("y"))
    });
}

#[test]
fn linear_layer() {
    let ps = rand_set(&[("x", &[5]), ("w", &[3, 5]), ("b", &[3])], 4);
    check(ps, |b| b.var("x").linear(b.var("w"), b.var("b")));
}

#[test]
fn fused_losses() {
    let ps = rand_set(&[("a", &[1, 4, 4]), ("c", &[1, 4, 4])], 5);
    check(ps.clone(), |b| b.var("a").mse(b.var("c")));
    check(ps.clone(), |b| b.var("a").mean_sq_dev(1.0));
    let target: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
    check(ps, move |b| b.var("a").sigmoid().weighted_bce(&target, 30.0, 1e-7));
}

#[test]
fn patch_nce_both_arguments() {
    let ps = rand_set(&[("q", &[4, 3, 3]), ("k", &[4, 3, 3])], 6);
    check(ps, |b| b.var("q").patch_nce(b.var("k"), &[0, 4, 8, 2], 0.07));
}
