use crate::element::Element;
use crate::params::{ParamGrads, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: i32,
}

/// Adam over one [`ParamSet`]. Parameters without a gradient are skipped
/// and keep their own step counters.
pub struct Adam<T: Element> {
    config: AdamConfig,
    slots: Vec<Slot<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let slots = params
            .iter()
            .map(|(_, t)| Slot {
                m: vec![T::zero(); t.numel()],
                v: vec![T::zero(); t.numel()],
                steps: 0,
            })
            .collect();
        Self { config, slots }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamGrads<T>) {
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let (b1, b2) = (T::lit(self.config.beta1), T::lit(self.config.beta2));
        let (lr, eps) = (self.config.lr, T::lit(self.config.eps));
        let one = T::one();
        for (i, name) in names.iter().enumerate() {
            let Some(g) = grads.get(i) else { continue };
            let slot = &mut self.slots[i];
            slot.steps += 1;
            let bc1 = T::lit(1.0 - self.config.beta1.powi(slot.steps));
            let bc2 = T::lit(1.0 - self.config.beta2.powi(slot.steps));
            let lr = T::lit(lr);
            let p = params.get_mut(name).expect("param present");
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(slot.m.iter_mut())
                .zip(slot.v.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        let g = Graph::new();
        let b = ps.bind(&g, true);
        let loss = b.var("w").mean_sq_dev(0.0);
        let mut grads = g.backward(loss);
        let pg = b.grads(&mut grads);
        drop(b);
        opt.step(&mut ps, &pg);
        let w = ps.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 2e-4)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 2e-4)).abs() < 1e-9);
    }
}
