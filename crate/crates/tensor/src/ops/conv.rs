//! Convolution via im2col + GEMM, 2×2 max pooling and nearest upsampling.

use crate::element::Element;
use crate::graph::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `[C, H, W]` into `[C·k·k, OH·OW]`.
pub fn im2col<T: Element>(x: &[T], geom: &ConvGeom) -> Vec<T> {
    let ConvGeom {
        channels,
        height,
        width,
        kernel,
        stride,
        pad,
    } = *geom;
    let (oh, ow) = geom.out_hw();
    let mut cols = vec![T::zero(); channels * kernel * kernel * oh * ow];
    for c in 0..channels {
        let plane = &x[c * height * width..(c + 1) * height * width];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * width..(iy as usize + 1) * width];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        // contiguous run of valid ox
                        let lo = pad.saturating_sub(kx);
                        let hi = (width + pad - kx).min(ow);
                        if lo < hi {
                            let start = lo + kx - pad;
                            drow[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < width as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds `[C·k·k, OH·OW]` back onto `[C, H, W]`, summing overlaps.
pub fn col2im<T: Element>(cols: &[T], geom: &ConvGeom) -> Vec<T> {
    let ConvGeom {
        channels,
        height,
        width,
        kernel,
        stride,
        pad,
    } = *geom;
    let (oh, ow) = geom.out_hw();
    let mut x = vec![T::zero(); channels * height * width];
    for c in 0..channels {
        let plane = &mut x[c * height * width..(c + 1) * height * width];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * width..(iy as usize + 1) * width];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < width as isize {
                            let d = &mut drow[ix as usize];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
    x
}

impl<'g, T: Element> Var<'g, T> {
    /// 2D convolution. `weight` is `[C_out, C_in, k, k]`, `bias` is `[C_out]`.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let (channels, height, width) = x.chw().expect("conv2d input");
        let wv = weight.value();
        let (c_out, kernel) = match wv.shape() {
            &[co, ci, k, k2] if ci == channels && k == k2 => (co, k),
            s => panic!("conv2d: weight {s:?} does not fit input with {channels} channels"),
        };
        assert!(
            height + 2 * pad >= kernel && width + 2 * pad >= kernel,
            "conv2d: kernel {kernel} larger than padded {height}x{width}"
        );
        let geom = ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let k_dim = channels * kernel * kernel;
        let n = oh * ow;
        let needs_grad = self.requires_grad() || weight.requires_grad();
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(im2col(x.data(), &geom))
        };
        let mut out = vec![T::zero(); c_out * n];
        {
            let b = cols.as_deref().unwrap_or(x.data());
            T::gemm(c_out, k_dim, n, wv.data(), false, b, false, &mut out, false);
        }
        if let Some(bias) = bias {
            let bv = bias.value();
            for (row, &b) in out.chunks_mut(n).zip(bv.data()) {
                row.iter_mut().for_each(|v| *v = *v + b);
            }
        }
        let out = Tensor::new(&[c_out, oh, ow], out).expect("conv output");
        let cols = if needs_grad { cols } else { None };
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let wshape = wv.shape().to_vec();
        self.graph.op(
            &parents,
            out,
            Box::new(move |g, inputs, needs| {
                let gd = g.data();
                let mut grads = Vec::with_capacity(3);
                let dx = needs[0].then(|| {
                    let mut dcols = vec![T::zero(); k_dim * n];
                    T::gemm(k_dim, c_out, n, inputs[1].data(), true, gd, false, &mut dcols, false);
                    let dx = if geom.is_pointwise() {
                        dcols
                    } else {
                        col2im(&dcols, &geom)
                    };
                    Tensor::new(&[channels, height, width], dx).expect("conv dx")
                });
                grads.push(dx);
                let dw = needs[1].then(|| {
                    let b = cols.as_deref().unwrap_or(inputs[0].data());
                    let mut dw = vec![T::zero(); c_out * k_dim];
                    T::gemm(c_out, n, k_dim, gd, false, b, true, &mut dw, false);
                    Tensor::new(&wshape, dw).expect("conv dw")
                });
                grads.push(dw);
                if inputs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let sums = gd.chunks(n).map(|r| r.iter().copied().sum()).collect();
                        Tensor::new(&[c_out], sums).expect("conv db")
                    }));
                }
                grads
            }),
        )
    }

    /// 2×2 max pooling with stride 2; H and W must be even.
    pub fn max_pool2(self) -> Var<'g, T> {
        let x = self.value();
        let (c, h, w) = x.chw().expect("max_pool2 input");
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even H and W, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut arg = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i0 = base + 2 * oy * w + 2 * ox;
                    let mut best = i0;
                    for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                        if xd[cand] > xd[best] {
                            best = cand;
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], out).expect("pool output");
        self.graph.op(
            &[self],
            out,
            Box::new(move |g, _, _| {
                let mut dx = vec![T::zero(); c * h * w];
                for (&i, &gv) in arg.iter().zip(g.data()) {
                    dx[i] = dx[i] + gv;
                }
                vec![Some(Tensor::new(&[c, h, w], dx).expect("pool dx"))]
            }),
        )
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(self) -> Var<'g, T> {
        let x = self.value();
        let (c, h, w) = x.chw().expect("upsample2 input");
        let (oh, ow) = (2 * h, 2 * w);
        let xd = x.data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let src = &xd[ch * h * w + (oy / 2) * w..ch * h * w + (oy / 2 + 1) * w];
                let dst = &mut out[ch * oh * ow + oy * ow..ch * oh * ow + (oy + 1) * ow];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = src[ox / 2];
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], out).expect("upsample output");
        self.graph.op(
            &[self],
            out,
            Box::new(move |g, _, _| {
                let gd = g.data();
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let d = &mut dx[ch * h * w + (oy / 2) * w + ox / 2];
                            *d = *d + gd[ch * oh * ow + oy * ow + ox];
                        }
                    }
                }
                vec![Some(Tensor::new(&[c, h, w], dx).expect("upsample dx"))]
            }),
        )
    }
}
