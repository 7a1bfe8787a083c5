//! Fused scalar losses with hand-written backward rules.

use crate::element::Element;
use crate::graph::Var;
use crate::tensor::Tensor;

impl<'g, T: Element> Var<'g, T> {
    /// `mean((self - other)^2)`.
    pub fn mse(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mse: shape mismatch");
        let n = T::lit(a.numel() as f64);
        let diff = a.zip_map(&b, |x, y| x - y);
        let loss = diff.data().iter().map(|&d| d * d).sum::<T>() / n;
        let two_over_n = T::lit(2.0) / n;
        self.graph.op(
            &[self, other],
            Tensor::scalar(loss),
            Box::new(move |g, _, needs| {
                let s = g.data()[0] * two_over_n;
                vec![
                    needs[0].then(|| diff.map(|d| d * s)),
                    needs[1].then(|| diff.map(|d| -d * s)),
                ]
            }),
        )
    }

    /// `mean((self - target)^2)` against a constant; least-squares GAN terms.
    pub fn mean_sq_dev(self, target: f64) -> Var<'g, T> {
        let t = T::lit(target);
        let a = self.value();
        let n = T::lit(a.numel() as f64);
        let diff = a.map(|x| x - t);
        let loss = diff.data().iter().map(|&d| d * d).sum::<T>() / n;
        let two_over_n = T::lit(2.0) / n;
        self.graph.op(
            &[self],
            Tensor::scalar(loss),
            Box::new(move |g, _, _| {
                let s = g.data()[0] * two_over_n;
                vec![Some(diff.map(|d| d * s))]
            }),
        )
    }

    /// Class-weighted binary cross-entropy on probabilities:
    /// `mean(-[w·y·ln p + (1-y)·ln(1-p)])`, with `p` clamped to `[eps, 1-eps]`.
    pub fn weighted_bce(self, target: &[T], fg_weight: f64, eps: f64) -> Var<'g, T> {
        let p = self.value();
        assert_eq!(p.numel(), target.len(), "weighted_bce: shape mismatch");
        let n = T::lit(p.numel() as f64);
        let w = T::lit(fg_weight);
        let (lo, hi) = (T::lit(eps), T::one() - T::lit(eps));
        let one = T::one();
        let mut loss = T::zero();
        let mut dp = Vec::with_capacity(p.numel());
        for (&pv, &y) in p.data().iter().zip(target) {
            let pc = pv.max(lo).min(hi);
            loss = loss - (w * y * pc.ln() + (one - y) * (one - pc).ln());
            let inside = pv > lo && pv < hi;
            dp.push(if inside {
                -(w * y / pc - (one - y) / (one - pc)) / n
            } else {
                T::zero()
            });
        }
        let dp = Tensor::new(p.shape(), dp).expect("bce grad");
        self.graph.op(
            &[self],
            Tensor::scalar(loss / n),
            Box::new(move |g, _, _| {
                let s = g.data()[0];
                vec![Some(dp.map(|d| d * s))]
            }),
        )
    }

    /// Patch-wise InfoNCE between two `[C, H, W]` feature maps sampled at
    /// `positions` (flat H×W indices). Row `i` of the similarity matrix
    /// treats position `i` in `keys` as the positive and all others as
    /// negatives.
    pub fn patch_nce(self, keys: Var<'g, T>, positions: &[usize], temperature: f64) -> Var<'g, T> {
        let (fq, fk) = (self.value(), keys.value());
        let (c, h, w) = fq.chw().expect("patch_nce query");
        assert_eq!(fk.shape(), fq.shape(), "patch_nce: feature maps differ in shape");
        let hw = h * w;
        let p = positions.len();
        assert!(p > 0 && positions.iter().all(|&i| i < hw), "patch_nce: bad positions");
        let inv_t = T::lit(1.0 / temperature);
        let norm_eps = T::lit(1e-12);

        // gather + L2-normalize: rows are patches, columns channels
        let gather = |f: &Tensor<T>| {
            let mut rows = vec![T::zero(); p * c];
            let mut norms = vec![T::zero(); p];
            for (i, &pos) in positions.iter().enumerate() {
                for ch in 0..c {
                    rows[i * c + ch] = f.data()[ch * hw + pos];
                }
                let nrm = rows[i * c..(i + 1) * c]
                    .iter()
                    .map(|&v| v * v)
                    .sum::<T>()
                    .sqrt()
                    .max(norm_eps);
                norms[i] = nrm;
                rows[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = *v / nrm);
            }
            (rows, norms)
        };
        let (q, q_norm) = gather(&fq);
        let (k, k_norm) = gather(&fk);

        let mut logits = vec![T::zero(); p * p];
        T::gemm(p, c, p, &q, false, &k, true, &mut logits, false);
        logits.iter_mut().for_each(|l| *l = *l * inv_t);
        let mut soft = vec![T::zero(); p * p];
        let mut loss = T::zero();
        for i in 0..p {
            let row = &logits[i * p..(i + 1) * p];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&l| (l - m).exp()).sum();
            loss = loss + (m + z.ln()) - row[i];
            for j in 0..p {
                soft[i * p + j] = (row[j] - m).exp() / z;
            }
        }
        let pn = T::lit(p as f64);
        let loss = loss / pn;
        let positions = positions.to_vec();

        self.graph.op(
            &[self, keys],
            Tensor::scalar(loss),
            Box::new(move |g, _, needs| {
                let s = g.data()[0] / pn * inv_t;
                // dL/dlogits scaled so that dq = dl · k and dk = dlᵀ · q
                let mut dl = soft.clone();
                for i in 0..p {
                    dl[i * p + i] = dl[i * p + i] - T::one();
                }
                dl.iter_mut().for_each(|v| *v = *v * s);
                let scatter = |du: Vec<T>, u: &[T], norms: &[T]| {
                    let mut df = vec![T::zero(); c * hw];
                    for (i, &pos) in positions.iter().enumerate() {
                        let ui = &u[i * c..(i + 1) * c];
                        let dui = &du[i * c..(i + 1) * c];
                        let dot: T = ui.iter().zip(dui).map(|(&a, &b)| a * b).sum();
                        for ch in 0..c {
                            let v = (dui[ch] - ui[ch] * dot) / norms[i];
                            let d = &mut df[ch * hw + pos];
                            *d = *d + v;
                        }
                    }
                    Tensor::new(&[c, h, w], df).expect("nce grad")
                };
                let dq = needs[0].then(|| {
                    let mut du = vec![T::zero(); p * c];
                    T::gemm(p, p, c, &dl, false, &k, false, &mut du, false);
                    scatter(du, &q, &q_norm)
                });
                let dk = needs[1].then(|| {
                    let mut du = vec![T::zero(); p * c];
                    T::gemm(p, p, c, &dl, true, &q, false, &mut du, false);
                    scatter(du, &k, &k_norm)
                });
                vec![dq, dk]
            }),
        )
    }
}
