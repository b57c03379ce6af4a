//! 2D convolution, pooling and upsampling over `(C, H, W)` feature maps.

use super::linalg::gemm;
use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Unfolds `x: (c, h, w)` into `(c·k·k, h·w)` columns, zero padding `k/2`.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    let line = &mut dst[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[ch * hw + si as usize * w..ch * hw + (si as usize + 1) * w];
                    for (j, v) in line.iter_mut().enumerate() {
                        let sj = j as isize + dj;
                        *v = if sj < 0 || sj >= w as isize { 0.0 } else { src[sj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `gx`.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, gx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let base = ch * hw + si as usize * w;
                    for j in 0..w {
                        let sj = j as isize + dj;
                        if sj >= 0 && sj < w as isize {
                            gx[base + sj as usize] += src[i * w + j];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Same-padded stride-1 convolution: `x: (C, H, W)`, `w: (O, C, k, k)`
    /// with odd `k`, `b: (O)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(weight));
        let bad = || Error::Shape {
            op: "conv2d",
            left: vx.shape().to_vec(),
            right: vw.shape().to_vec(),
        };
        if vx.ndim() != 3 || vw.ndim() != 4 || vw.dim(1) != vx.dim(0) || vw.dim(2) != vw.dim(3) {
            return Err(bad());
        }
        let k = vw.dim(2);
        if k % 2 == 0 {
            return Err(Error::Invalid(format!("conv2d kernel size {k} is not odd")));
        }
        let (c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let o = vw.dim(0);
        if self.value(bias).shape() != [o] {
            return Err(bad());
        }
        let hw = h * w;
        let ckk = c * k * k;
        let mut y = Vec::with_capacity(o * hw);
        for &bv in self.value(bias).data() {
            y.extend(std::iter::repeat_n(bv, hw));
        }
        if k == 1 {
            gemm(o, c, hw, vw.data(), false, vx.data(), false, &mut y, true);
        } else {
            let mut cols = vec![0.0; ckk * hw];
            im2col(vx.data(), c, h, w, k, &mut cols);
            gemm(o, ckk, hw, vw.data(), false, &cols, false, &mut y, true);
        }
        Ok(self.push(
            Tensor::from_parts(vec![o, h, w], y),
            &[x, weight, bias],
            Box::new(move |g, ctx| {
                let (vx, vw) = (ctx.value(x), ctx.value(weight));
                if ctx.wants(bias) {
                    let gb = ctx.grad_mut(bias);
                    for (oc, acc) in gb.iter_mut().enumerate() {
                        *acc += g[oc * hw..(oc + 1) * hw].iter().sum::<f64>();
                    }
                }
                if k == 1 {
                    if ctx.wants(weight) {
                        gemm(o, hw, c, g, false, vx.data(), true, ctx.grad_mut(weight), true);
                    }
                    if ctx.wants(x) {
                        gemm(c, o, hw, vw.data(), true, g, false, ctx.grad_mut(x), true);
                    }
                    return;
                }
                if ctx.wants(weight) {
                    let mut cols = vec![0.0; ckk * hw];
                    im2col(vx.data(), c, h, w, k, &mut cols);
                    gemm(o, hw, ckk, g, false, &cols, true, ctx.grad_mut(weight), true);
                }
                if ctx.wants(x) {
                    let mut gcols = vec![0.0; ckk * hw];
                    gemm(ckk, o, hw, vw.data(), true, g, false, &mut gcols, false);
                    col2im(&gcols, c, h, w, k, ctx.grad_mut(x));
                }
            }),
        ))
    }

    /// 2x2 max pooling with stride 2; extents must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 3 || vx.dim(1) % 2 != 0 || vx.dim(2) % 2 != 0 {
            return Err(Error::Invalid(format!(
                "maxpool2 needs even spatial extents, got {:?}",
                vx.shape()
            )));
        }
        let (c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let (ho, wo) = (h / 2, w / 2);
        let xs = vx.data();
        let mut out = vec![0.0; c * ho * wo];
        let mut arg = vec![0usize; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = ch * h * w + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * i + di) * w + 2 * j + dj;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    let o = (ch * ho + i) * wo + j;
                    out[o] = xs[best];
                    arg[o] = best;
                }
            }
        }
        self.mark_branches(arg.iter().copied());
        Ok(self.push(
            Tensor::from_parts(vec![c, ho, wo], out),
            &[x],
            Box::new(move |g, ctx| {
                let gx = ctx.grad_mut(x);
                for (o, &src) in arg.iter().enumerate() {
                    gx[src] += g[o];
                }
            }),
        ))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 3 {
            return Err(Error::Invalid(format!("upsample2 needs (C, H, W), got {:?}", vx.shape())));
        }
        let (c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let (ho, wo) = (2 * h, 2 * w);
        let xs = vx.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[(ch * ho + i) * wo + j] = xs[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, ho, wo], out),
            &[x],
            Box::new(move |g, ctx| {
                let gx = ctx.grad_mut(x);
                for ch in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            gx[(ch * h + i / 2) * w + j / 2] += g[(ch * ho + i) * wo + j];
                        }
                    }
                }
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window convolution with zero padding.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64]) -> Vec<f64> {
        let (c, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
        let (o, k) = (w.dim(0), w.dim(2));
        let pad = (k / 2) as isize;
        let mut y = vec![0.0; o * h * wd];
        for oc in 0..o {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = b[oc];
                    for ch in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let si = i as isize + ki as isize - pad;
                                let sj = j as isize + kj as isize - pad;
                                if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((oc * c + ch) * k + ki) * k + kj]
                                    * x.data()[(ch * h + si as usize) * wd + sj as usize];
                            }
                        }
                    }
                    y[(oc * h + i) * wd + j] = acc;
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        for (c, o, k, h, w) in [(1, 1, 3, 4, 4), (2, 3, 3, 5, 3), (3, 2, 5, 4, 6), (2, 2, 1, 3, 3)] {
            let x = Tensor::new(&[c, h, w], pseudo(c * h * w, 0.7)).unwrap();
            let wt = Tensor::new(&[o, c, k, k], pseudo(o * c * k * k, 1.3)).unwrap();
            let b = pseudo(o, 2.1);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(wt.clone());
            let bv = tape.constant(Tensor::from_vec(b.clone()));
            let y = tape.conv2d(xv, wv, bv).unwrap();
            let want = conv_oracle(&x, &wt, &b);
            for (a, e) in tape.value(y).data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_input_gives_bias_only() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let w = tape.constant(Tensor::new(&[3, 2, 3, 3], pseudo(54, 0.5)).unwrap());
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, w, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_and_upsample() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2, 4], vec![1., 5., 2., 0., 3., 4., 9., 8.]).unwrap());
        let p = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0, 9.0]);
        let u = tape.upsample2(p).unwrap();
        assert_eq!(tape.value(u).shape(), &[1, 2, 4]);
        assert_eq!(tape.value(u).data(), &[5., 5., 9., 9., 5., 5., 9., 9.]);
        let odd = tape.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(tape.maxpool2(odd).is_err());
    }
}
