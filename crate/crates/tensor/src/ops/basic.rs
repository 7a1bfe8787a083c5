//! Elementwise, broadcast and reduction ops.

use crate::element::Element;
use crate::graph::Var;
use crate::tensor::Tensor;

fn same_shape<T: Element>(a: &Var<'_, T>, b: &Var<'_, T>, op: &str) {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
}

// graph-building methods; the std operator traits would hide the tape
#[allow(clippy::should_implement_trait)]
impl<'g, T: Element> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        same_shape(&self, &other, "add");
        let value = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph.op(
            &[self, other],
            value,
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        same_shape(&self, &other, "sub");
        let value = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.op(
            &[self, other],
            value,
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        )
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        same_shape(&self, &other, "mul");
        let value = self.value().zip_map(&other.value(), |a, b| a * b);
        self.graph.op(
            &[self, other],
            value,
            Box::new(|g, inputs, needs| {
                vec![
                    needs[0].then(|| g.zip_map(inputs[1], |g, b| g * b)),
                    needs[1].then(|| g.zip_map(inputs[0], |g, a| g * a)),
                ]
            }),
        )
    }

    /// Multiplies by a constant tensor (dropout masks, fixed weights).
    pub fn mul_const(self, factor: &Tensor<T>) -> Var<'g, T> {
        let c = self.graph.constant(factor.clone());
        self.mul(c)
    }

    pub fn scale(self, s: f64) -> Var<'g, T> {
        let s = T::lit(s);
        let value = self.value().map(|x| x * s);
        self.graph
            .op(&[self], value, Box::new(move |g, _, _| vec![Some(g.map(|x| x * s))]))
    }

    pub fn add_scalar(self, s: f64) -> Var<'g, T> {
        let s = T::lit(s);
        let value = self.value().map(|x| x + s);
        self.graph.op(&[self], value, Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let in_shape = self.shape();
        let value = (*self.value())
            .clone()
            .reshaped(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.graph.op(
            &[self],
            value,
            Box::new(move |g, _, _| vec![Some(g.clone().reshaped(&in_shape).expect("same numel"))]),
        )
    }

    /// Adds a per-channel vector `[C]` to a `[C, H, W]` map.
    pub fn add_channel(self, v: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let (c, h, w) = x.chw().expect("add_channel input");
        assert_eq!(v.shape(), vec![c], "add_channel: vector must be [C]");
        let hw = h * w;
        let vv = v.value();
        let mut out = (*x).clone();
        for (ch, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let b = vv.data()[ch];
            plane.iter_mut().for_each(|p| *p = *p + b);
        }
        self.graph.op(
            &[self, v],
            out,
            Box::new(move |g, _, needs| {
                let dv = needs[1].then(|| {
                    let sums = g.data().chunks(hw).map(|p| p.iter().copied().sum()).collect();
                    Tensor::new(&[c], sums).expect("channel sums")
                });
                vec![Some(g.clone()), dv]
            }),
        )
    }

    /// Multiplies a `[C, H, W]` map by a `[1, H, W]` spatial map.
    pub fn mul_spatial(self, m: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let (_, h, w) = x.chw().expect("mul_spatial input");
        assert_eq!(m.shape(), vec![1, h, w], "mul_spatial: map must be [1, H, W]");
        let hw = h * w;
        let mv = m.value();
        let mut out = (*x).clone();
        for plane in out.data_mut().chunks_mut(hw) {
            for (p, &s) in plane.iter_mut().zip(mv.data()) {
                *p = *p * s;
            }
        }
        self.graph.op(
            &[self, m],
            out,
            Box::new(move |g, inputs, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = g.clone();
                    for plane in dx.data_mut().chunks_mut(hw) {
                        for (p, &s) in plane.iter_mut().zip(inputs[1].data()) {
                            *p = *p * s;
                        }
                    }
                    dx
                });
                let dm = needs[1].then(|| {
                    let mut dm = vec![T::zero(); hw];
                    for (gp, xp) in g.data().chunks(hw).zip(inputs[0].data().chunks(hw)) {
                        for ((d, &gv), &xv) in dm.iter_mut().zip(gp).zip(xp) {
                            *d = *d + gv * xv;
                        }
                    }
                    Tensor::new(&[1, h, w], dm).expect("spatial grad")
                });
                vec![dx, dm]
            }),
        )
    }

    /// Channel concatenation of two `[C, H, W]` maps.
    pub fn concat_channels(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let (ca, h, w) = a.chw().expect("concat lhs");
        let (cb, h2, w2) = b.chw().expect("concat rhs");
        assert_eq!((h, w), (h2, w2), "concat_channels: spatial mismatch");
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        let out = Tensor::new(&[ca + cb, h, w], data).expect("concat");
        let split = ca * h * w;
        self.graph.op(
            &[self, other],
            out,
            Box::new(move |g, _, needs| {
                let (ga, gb) = g.data().split_at(split);
                vec![
                    needs[0].then(|| Tensor::new(&[ca, h, w], ga.to_vec()).expect("split")),
                    needs[1].then(|| Tensor::new(&[cb, h, w], gb.to_vec()).expect("split")),
                ]
            }),
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let s = T::lit(slope);
        let value = self.value().map(|x| if x > T::zero() { x } else { x * s });
        self.graph.op(
            &[self],
            value,
            Box::new(move |g, inputs, _| {
                vec![Some(g.zip_map(inputs[0], |g, x| if x > T::zero() { g } else { g * s }))]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let value = self.value().map(|x| T::one() / (T::one() + (-x).exp()));
        let y = value.clone();
        self.graph.op(
            &[self],
            value,
            Box::new(move |g, _, _| vec![Some(g.zip_map(&y, |g, y| g * y * (T::one() - y)))]),
        )
    }

    pub fn tanh(self) -> Var<'g, T> {
        let value = self.value().map(|x| x.tanh());
        let y = value.clone();
        self.graph.op(
            &[self],
            value,
            Box::new(move |g, _, _| vec![Some(g.zip_map(&y, |g, y| g * (T::one() - y * y)))]),
        )
    }

    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = Tensor::scalar(x.sum());
        self.graph.op(
            &[self],
            value,
            Box::new(move |g, _, _| vec![Some(Tensor::full(&shape, g.data()[0]))]),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }
}
