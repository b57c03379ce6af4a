//! Differentiable tensor operations recorded on a [`Tape`].

use std::rc::Rc;

use super::linalg::gemm;
use super::{Tape, Tensor, Var};
use crate::{Error, Result};

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How [`Tape::batch_norm`] groups values into channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnLayout {
    /// `(rows, C)`: each column is a channel.
    Rows,
    /// `(C, ...)`: each leading slice is a channel.
    Channels,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BnMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the given running mean and variance.
    Infer { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics produced in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, for running-statistics updates.
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |g, ctx| {
                ctx.accumulate(a, g);
                ctx.accumulate(b, g);
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("sub", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |g, ctx| {
                ctx.accumulate(a, g);
                if ctx.wants(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    ctx.accumulate(b, &neg);
                }
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |g, ctx| {
                let (va, vb) = (ctx.value(a), ctx.value(b));
                if ctx.wants(a) {
                    let ga: Vec<f64> = g.iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    ctx.accumulate(a, &ga);
                }
                if ctx.wants(b) {
                    let gb: Vec<f64> = g.iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    ctx.accumulate(b, &gb);
                }
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(
            out,
            &[a],
            Box::new(move |g, ctx| {
                let ga: Vec<f64> = g.iter().map(|v| v * s).collect();
                ctx.accumulate(a, &ga);
            }),
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(
            Tensor::scalar(s),
            &[a],
            Box::new(move |g, ctx| {
                let g0 = g[0];
                ctx.grad_mut(a).iter_mut().for_each(|v| *v += g0);
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, &[a], Box::new(move |g, ctx| ctx.accumulate(a, g))))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let live: Vec<usize> = out.data().iter().enumerate().filter(|(_, v)| **v > 0.0).map(|(i, _)| i).collect();
        self.mark_branches(live);
        self.push(
            out,
            &[a],
            Box::new(move |g, ctx| {
                let x = ctx.value(a).data();
                let ga = ctx.grad_mut(a);
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let y = out.data().to_vec();
        self.push(
            out,
            &[a],
            Box::new(move |g, ctx| {
                let ga = ctx.grad_mut(a);
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let y = out.data().to_vec();
        self.push(
            out,
            &[a],
            Box::new(move |g, ctx| {
                let ga = ctx.grad_mut(a);
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let k = *va.shape().last().unwrap_or(&1);
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(k.max(1)) {
            softmax_in_place(row);
        }
        let y = data.clone();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(
            out,
            &[a],
            Box::new(move |g, ctx| {
                let ga = ctx.grad_mut(a);
                for ((gr, yr), gar) in g.chunks(k).zip(y.chunks(k)).zip(ga.chunks_mut(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for j in 0..k {
                        gar[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }),
        )
    }

    /// `(m, k) · (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(0) {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut c, false);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], c),
            &[a, b],
            Box::new(move |g, ctx| {
                let (va, vb) = (ctx.value(a), ctx.value(b));
                if ctx.wants(a) {
                    let ga = ctx.grad_mut(a);
                    gemm(m, n, k, g, false, vb.data(), true, ga, true);
                }
                if ctx.wants(b) {
                    let gb = ctx.grad_mut(b);
                    gemm(k, m, n, va.data(), true, g, false, gb, true);
                }
            }),
        ))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `(in, out)`, `b` is `(out)`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let din = *vx.shape().last().unwrap_or(&0);
        if vw.ndim() != 2 || vw.dim(0) != din || vb.shape() != [vw.dim(1)] {
            return Err(shape_err("affine", vx.shape(), vw.shape()));
        }
        let dout = vw.dim(1);
        let rows = if din == 0 { 0 } else { vx.len() / din };
        let mut y = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            y.extend_from_slice(vb.data());
        }
        gemm(rows, din, dout, vx.data(), false, vw.data(), false, &mut y, true);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(
            Tensor::from_parts(shape, y),
            &[x, w, b],
            Box::new(move |g, ctx| {
                let (vx, vw) = (ctx.value(x), ctx.value(w));
                if ctx.wants(x) {
                    let gx = ctx.grad_mut(x);
                    gemm(rows, dout, din, g, false, vw.data(), true, gx, true);
                }
                if ctx.wants(w) {
                    let gw = ctx.grad_mut(w);
                    gemm(din, rows, dout, vx.data(), true, g, false, gw, true);
                }
                if ctx.wants(b) {
                    let gb = ctx.grad_mut(b);
                    for row in g.chunks(dout) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }),
        ))
    }

    /// Concatenation along the last axis; leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if &s[..s.len() - 1] != lead {
                return Err(shape_err("concat_last", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = first.clone();
        *shape.last_mut().unwrap() = total;
        let parts = parts.to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            &parts.clone(),
            Box::new(move |g, ctx| {
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if ctx.wants(p) {
                        let gp = ctx.grad_mut(p);
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }),
        ))
    }

    /// Concatenation along the first axis; trailing dimensions must agree.
    pub fn concat_first(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let tail = first[1..].to_vec();
        let mut lens = Vec::with_capacity(parts.len());
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(shape_err("concat_first", &first, v.shape()));
            }
            lead += v.dim(0);
            lens.push(v.len());
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let parts = parts.to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            &parts.clone(),
            Box::new(move |g, ctx| {
                let mut off = 0;
                for (&p, &n) in parts.iter().zip(&lens) {
                    ctx.accumulate(p, &g[off..off + n]);
                    off += n;
                }
            }),
        ))
    }

    /// Rows of `a` (viewed as `(shape[0], rest)`) at `idx`, in order.
    pub fn index_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let va = self.value(a);
        let n = va.dim(0);
        let w = if n == 0 { 0 } else { va.len() / n };
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx.iter() {
            if i >= n {
                return Err(Error::Invalid(format!("row index {i} out of range {n}")));
            }
            data.extend_from_slice(&va.data()[i * w..(i + 1) * w]);
        }
        let mut shape = va.shape().to_vec();
        shape[0] = idx.len();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            &[a],
            Box::new(move |g, ctx| {
                let ga = ctx.grad_mut(a);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..w {
                        ga[i * w + j] += g[r * w + j];
                    }
                }
            }),
        ))
    }

    /// Multiplies every element of row `i` of `x` by `s[i]`; `s` has
    /// `x.shape[0]` elements.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        let p = vx.dim(0);
        if vs.len() != p {
            return Err(shape_err("scale_rows", vx.shape(), vs.shape()));
        }
        let w = if p == 0 { 0 } else { vx.len() / p };
        let mut data = vx.data().to_vec();
        for (i, row) in data.chunks_mut(w.max(1)).enumerate().take(p) {
            let f = vs.data()[i];
            row.iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(
            Tensor::from_parts(vx.shape().to_vec(), data),
            &[x, s],
            Box::new(move |g, ctx| {
                let (vx, vs) = (ctx.value(x), ctx.value(s));
                if ctx.wants(x) {
                    let gx = ctx.grad_mut(x);
                    for i in 0..p {
                        let f = vs.data()[i];
                        for j in 0..w {
                            gx[i * w + j] += g[i * w + j] * f;
                        }
                    }
                }
                if ctx.wants(s) {
                    let gs = ctx.grad_mut(s);
                    for i in 0..p {
                        let xr = &vx.data()[i * w..(i + 1) * w];
                        let gr = &g[i * w..(i + 1) * w];
                        gs[i] += xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }),
        ))
    }

    /// Column-wise sum over contiguous row segments of a `(R, C)` tensor,
    /// with segments delimited as in [`Tape::segment_max`].
    pub fn segment_sum(&mut self, x: Var, offsets: Rc<Vec<usize>>) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 2 || offsets.last().copied() != Some(vx.dim(0)) {
            return Err(shape_err("segment_sum", vx.shape(), &[*offsets.last().unwrap_or(&0)]));
        }
        let c = vx.dim(1);
        let segs = offsets.len() - 1;
        let mut out = vec![0.0; segs * c];
        for s in 0..segs {
            for r in offsets[s]..offsets[s + 1] {
                for j in 0..c {
                    out[s * c + j] += vx.data()[r * c + j];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![segs, c], out),
            &[x],
            Box::new(move |g, ctx| {
                let gx = ctx.grad_mut(x);
                for s in 0..segs {
                    for r in offsets[s]..offsets[s + 1] {
                        for j in 0..c {
                            gx[r * c + j] += g[s * c + j];
                        }
                    }
                }
            }),
        ))
    }

    /// Column-wise maximum over contiguous row segments of a `(R, C)`
    /// tensor. Segment `s` spans rows `offsets[s]..offsets[s + 1]`; empty
    /// segments yield zeros. Ties resolve to the first row.
    pub fn segment_max(&mut self, x: Var, offsets: Rc<Vec<usize>>) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 2 || offsets.last().copied() != Some(vx.dim(0)) {
            return Err(shape_err("segment_max", vx.shape(), &[*offsets.last().unwrap_or(&0)]));
        }
        let c = vx.dim(1);
        let segs = offsets.len() - 1;
        let mut out = vec![0.0; segs * c];
        let mut arg = vec![usize::MAX; segs * c];
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if lo == hi {
                continue;
            }
            for j in 0..c {
                let mut best = lo;
                let mut bv = vx.data()[lo * c + j];
                for r in lo + 1..hi {
                    let v = vx.data()[r * c + j];
                    if v > bv {
                        bv = v;
                        best = r;
                    }
                }
                out[s * c + j] = bv;
                arg[s * c + j] = best;
            }
        }
        self.mark_branches(arg.iter().copied());
        Ok(self.push(
            Tensor::from_parts(vec![segs, c], out),
            &[x],
            Box::new(move |g, ctx| {
                let gx = ctx.grad_mut(x);
                for (k, &r) in arg.iter().enumerate() {
                    if r != usize::MAX {
                        gx[r * c + k % c] += g[k];
                    }
                }
            }),
        ))
    }

    /// Places row `i` of a `(P, C)` tensor at `(C, coords[i].0, coords[i].1)`
    /// of an `(C, h, w)` image; other cells are zero.
    pub fn scatter_image(
        &mut self,
        x: Var,
        coords: Rc<Vec<(usize, usize)>>,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 2 || vx.dim(0) != coords.len() {
            return Err(shape_err("scatter_image", vx.shape(), &[coords.len()]));
        }
        let c = vx.dim(1);
        let hw = h * w;
        let mut data = vec![0.0; c * hw];
        for (i, &(r, col)) in coords.iter().enumerate() {
            assert!(r < h && col < w, "pillar coordinate ({r}, {col}) outside {h}x{w} grid");
            for ch in 0..c {
                data[ch * hw + r * w + col] = vx.data()[i * c + ch];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, h, w], data),
            &[x],
            Box::new(move |g, ctx| {
                let gx = ctx.grad_mut(x);
                for (i, &(r, col)) in coords.iter().enumerate() {
                    for ch in 0..c {
                        gx[i * c + ch] += g[ch * hw + r * w + col];
                    }
                }
            }),
        ))
    }

    /// Batch normalization with per-channel scale `gamma` and shift `beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BnStats>)> {
        let vx = self.value(x);
        let c = match layout {
            BnLayout::Rows => *vx.shape().last().unwrap_or(&0),
            BnLayout::Channels => vx.dim(0),
        };
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err("batch_norm", vx.shape(), self.value(gamma).shape()));
        }
        let n = if c == 0 { 0 } else { vx.len() / c };
        // index of the k-th value of channel ch
        let at = move |ch: usize, k: usize| match layout {
            BnLayout::Rows => k * c + ch,
            BnLayout::Channels => ch * n + k,
        };
        let xs = vx.data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if n == 0 {
                    return Err(Error::Invalid("batch_norm on an empty batch in train mode".into()));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let m = (0..n).map(|k| xs[at(ch, k)]).sum::<f64>() / n as f64;
                    let v = (0..n).map(|k| (xs[at(ch, k)] - m).powi(2)).sum::<f64>() / n as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let unbiased = if n > 1 {
                    var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect()
                } else {
                    var.clone()
                };
                let stats = BnStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", &[c], &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut y = vec![0.0; xs.len()];
        for ch in 0..c {
            for k in 0..n {
                let i = at(ch, k);
                xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                y[i] = gm[ch] * xhat[i] + bt[ch];
            }
        }
        let train = matches!(mode, BnMode::Train);
        let out = Tensor::from_parts(vx.shape().to_vec(), y);
        let v = self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |g, ctx| {
                let gm = ctx.value(gamma).data().to_vec();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ch in 0..c {
                    for k in 0..n {
                        let i = at(ch, k);
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
                if ctx.wants(gamma) {
                    let gg = ctx.grad_mut(gamma);
                    for ch in 0..c {
                        gg[ch] += sum_gx[ch];
                    }
                }
                if ctx.wants(beta) {
                    let gb = ctx.grad_mut(beta);
                    for ch in 0..c {
                        gb[ch] += sum_g[ch];
                    }
                }
                if ctx.wants(x) {
                    let gx = ctx.grad_mut(x);
                    for ch in 0..c {
                        let scale = gm[ch] * inv_std[ch];
                        if train {
                            let mg = sum_g[ch] / n as f64;
                            let mgx = sum_gx[ch] / n as f64;
                            for k in 0..n {
                                let i = at(ch, k);
                                gx[i] += scale * (g[i] - mg - xhat[i] * mgx);
                            }
                        } else {
                            for k in 0..n {
                                let i = at(ch, k);
                                gx[i] += scale * g[i];
                            }
                        }
                    }
                }
            }),
        );
        Ok((v, stats))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Log-sum-exp of a row, stable for large magnitudes.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
