use crate::element::Element;
use crate::graph::Var;
use crate::tensor::Tensor;

impl<'g, T: Element> Var<'g, T> {
    /// Per-channel normalization over H×W with affine `gamma`/`beta` (`[C]`).
    pub fn instance_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let (c, h, w) = x.chw().expect("instance_norm input");
        assert_eq!(gamma.shape(), vec![c], "instance_norm: gamma must be [C]");
        assert_eq!(beta.shape(), vec![c], "instance_norm: beta must be [C]");
        let hw = h * w;
        let n = T::lit(hw as f64);
        let eps = T::lit(eps);
        let (gv, bv) = (gamma.value(), beta.value());
        let mut xhat = vec![T::zero(); c * hw];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            let plane = &x.data()[ch * hw..(ch + 1) * hw];
            let mean = plane.iter().copied().sum::<T>() / n;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[ch] = istd;
            let (g, b) = (gv.data()[ch], bv.data()[ch]);
            for i in 0..hw {
                let xh = (plane[i] - mean) * istd;
                xhat[ch * hw + i] = xh;
                out[ch * hw + i] = g * xh + b;
            }
        }
        let out = Tensor::new(&[c, h, w], out).expect("norm output");
        self.graph.op(
            &[self, gamma, beta],
            out,
            Box::new(move |g, inputs, needs| {
                let gd = g.data();
                let gamma = inputs[1].data();
                let mut dx = needs[0].then(|| vec![T::zero(); c * hw]);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let gp = &gd[ch * hw..(ch + 1) * hw];
                    let xp = &xhat[ch * hw..(ch + 1) * hw];
                    let sum_g: T = gp.iter().copied().sum();
                    let sum_gx: T = gp.iter().zip(xp).map(|(&a, &b)| a * b).sum();
                    dbeta[ch] = sum_g;
                    dgamma[ch] = sum_gx;
                    if let Some(dx) = dx.as_mut() {
                        let scale = gamma[ch] * inv_std[ch];
                        let (mg, mgx) = (sum_g / n, sum_gx / n);
                        for i in 0..hw {
                            dx[ch * hw + i] = scale * (gp[i] - mg - xp[i] * mgx);
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(&[c, h, w], d).expect("norm dx")),
                    needs[1].then(|| Tensor::new(&[c], dgamma).expect("dgamma")),
                    needs[2].then(|| Tensor::new(&[c], dbeta).expect("dbeta")),
                ]
            }),
        )
    }
}
