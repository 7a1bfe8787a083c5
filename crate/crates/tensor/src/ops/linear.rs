use crate::element::Element;
use crate::graph::Var;
use crate::tensor::Tensor;

impl<'g, T: Element> Var<'g, T> {
    /// `W x + b` for a vector `x: [K]`, `W: [N, K]`, `b: [N]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let wv = weight.value();
        let k = x.numel();
        let n = match wv.shape() {
            &[n, kk] if kk == k => n,
            s => panic!("linear: weight {s:?} does not fit input of length {k}"),
        };
        assert_eq!(bias.shape(), vec![n], "linear: bias must be [N]");
        let mut out = bias.value().data().to_vec();
        T::gemm(n, k, 1, wv.data(), false, x.data(), false, &mut out, true);
        let out = Tensor::new(&[n], out).expect("linear output");
        self.graph.op(
            &[self, weight, bias],
            out,
            Box::new(move |g, inputs, needs| {
                let gd = g.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); k];
                    T::gemm(k, n, 1, inputs[1].data(), true, gd, false, &mut dx, false);
                    Tensor::new(inputs[0].shape(), dx).expect("linear dx")
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![T::zero(); n * k];
                    T::gemm(n, 1, k, gd, false, inputs[0].data(), false, &mut dw, false);
                    Tensor::new(&[n, k], dw).expect("linear dw")
                });
                vec![dx, dw, needs[2].then(|| g.clone())]
            }),
        )
    }
}
