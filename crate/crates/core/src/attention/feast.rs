//! Feature-steered graph convolution.
//!
//! `y_i = b + sum_m 1/|N_i| sum_{j in N_i} p_m(x_i, x_j) W_m x_j` with
//! head weights `p_m = softmax_m(u_m . (x_j - x_i) + c_m)`.

use std::rc::Rc;

use crate::nn::linalg::gemm;
use crate::nn::ops::softmax_in_place;
use crate::nn::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Neighbourhood lists of a graph.
#[derive(Debug, Clone, PartialEq)]
pub enum Neighbors {
    /// Every node aggregates from the same node list.
    Shared(Vec<usize>),
    PerNode(Vec<Vec<usize>>),
}

impl Neighbors {
    pub fn of(&self, i: usize) -> &[usize] {
        match self {
            Neighbors::Shared(n) => n,
            Neighbors::PerNode(n) => &n[i],
        }
    }

    fn validate(&self, v: usize) -> Result<()> {
        if let Neighbors::PerNode(n) = self {
            if n.len() != v {
                return Err(Error::Invalid(format!("{} neighbourhood lists for {v} nodes", n.len())));
            }
        }
        for i in 0..v {
            let n = self.of(i);
            if n.is_empty() {
                return Err(Error::Invalid(format!("node {i} has an empty neighbourhood")));
            }
            if let Some(&j) = n.iter().find(|&&j| j >= v) {
                return Err(Error::Invalid(format!("node {i} lists neighbour {j} of {v} nodes")));
            }
        }
        Ok(())
    }
}

/// FeaSt layer parameters: `w: (M, in, out)`, `u: (in, M)`, `c: (M)`, `b: (out)`.
#[derive(Debug, Clone, Copy)]
pub struct FeastVars {
    pub w: Var,
    pub u: Var,
    pub c: Var,
    pub b: Var,
}

/// Head weights of every `(i, j)` pair, `M` values per pair, pairs
/// enumerated node by node in neighbour order. `ux` is `x u`, `(V, M)`.
fn head_weights(ux: &[f64], m: usize, c: &[f64], nbrs: &Neighbors, v: usize) -> Vec<f64> {
    let mut p = Vec::new();
    let mut logits = vec![0.0; m];
    for i in 0..v {
        for &j in nbrs.of(i) {
            for h in 0..m {
                logits[h] = ux[j * m + h] - ux[i * m + h] + c[h];
            }
            softmax_in_place(&mut logits);
            p.extend_from_slice(&logits);
        }
    }
    p
}

/// Head weights `p_m(x_i, x_j)` for all graph edges, as laid out by the
/// convolution (`M` per edge).
pub fn feast_head_weights(x: &Tensor, nbrs: &Neighbors, u: &Tensor, c: &Tensor) -> Result<Vec<f64>> {
    let (v, cin) = (x.dim(0), x.dim(1));
    let m = c.len();
    if u.shape() != [cin, m] {
        return Err(Error::Shape {
            op: "feast_conv",
            left: u.shape().to_vec(),
            right: vec![cin, m],
        });
    }
    nbrs.validate(v)?;
    let mut ux = vec![0.0; v * m];
    gemm(v, cin, m, x.data(), false, u.data(), false, &mut ux, false);
    Ok(match nbrs {
        Neighbors::Shared(keys) => {
            let ph = shared_head_weights(&ux, m, c.data(), keys, v);
            (0..v * keys.len()).flat_map(|e| ph.iter().map(move |p| p[e])).collect()
        }
        Neighbors::PerNode(_) => head_weights(&ux, m, c.data(), nbrs, v),
    })
}

/// Head weights of a shared key list as `M` matrices `(V, K)`. The
/// logits split into a key term and a node term, so the exponentials are
/// taken per node instead of per edge unless the logit range is too wide
/// for that to stay finite.
fn shared_head_weights(ux: &[f64], m: usize, c: &[f64], keys: &[usize], v: usize) -> Vec<Vec<f64>> {
    let kk = keys.len();
    let a: Vec<f64> = keys.iter().flat_map(|&j| (0..m).map(move |h| ux[j * m + h] + c[h])).collect();
    let range = |s: &[f64]| {
        let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        (lo, hi)
    };
    let ((alo, ahi), (ulo, uhi)) = (range(&a), range(&ux[..v * m]));
    let mut ph = vec![vec![0.0; v * kk]; m];
    if ahi - alo + uhi - ulo < 600.0 {
        let ea: Vec<f64> = a.iter().map(|x| (x - ahi).exp()).collect();
        let eb: Vec<f64> = ux[..v * m].iter().map(|x| (ulo - x).exp()).collect();
        let mut t = vec![0.0; m];
        for i in 0..v {
            let bi = &eb[i * m..(i + 1) * m];
            for jj in 0..kk {
                let aj = &ea[jj * m..(jj + 1) * m];
                let mut den = 0.0;
                for h in 0..m {
                    t[h] = aj[h] * bi[h];
                    den += t[h];
                }
                for h in 0..m {
                    ph[h][i * kk + jj] = t[h] / den;
                }
            }
        }
    } else {
        let mut logits = vec![0.0; m];
        for i in 0..v {
            for jj in 0..kk {
                for h in 0..m {
                    logits[h] = a[jj * m + h] - ux[i * m + h];
                }
                softmax_in_place(&mut logits);
                for h in 0..m {
                    ph[h][i * kk + jj] = logits[h];
                }
            }
        }
    }
    ph
}

/// Per-head `(K, out)` blocks of the transformed key rows, times `scale`.
fn key_blocks(z: &[f64], keys: &[usize], m: usize, cout: usize, scale: f64) -> Vec<Vec<f64>> {
    let mo = m * cout;
    (0..m)
        .map(|h| {
            keys.iter()
                .flat_map(|&j| z[j * mo + h * cout..j * mo + (h + 1) * cout].iter().map(|x| x * scale))
                .collect()
        })
        .collect()
}

impl Tape {
    pub fn feast_conv(&mut self, x: Var, nbrs: Rc<Neighbors>, p: FeastVars) -> Result<Var> {
        let (vx, vw, vu, vc, vb) = (
            self.value(x),
            self.value(p.w),
            self.value(p.u),
            self.value(p.c),
            self.value(p.b),
        );
        if vx.ndim() != 2 || vw.ndim() != 3 || vw.dim(1) != vx.dim(1) {
            return Err(Error::Shape {
                op: "feast_conv",
                left: vx.shape().to_vec(),
                right: vw.shape().to_vec(),
            });
        }
        let (v, cin) = (vx.dim(0), vx.dim(1));
        let (m, cout) = (vw.dim(0), vw.dim(2));
        if vc.len() != m || vb.len() != cout {
            return Err(Error::Shape {
                op: "feast_conv",
                left: vec![vc.len(), vb.len()],
                right: vec![m, cout],
            });
        }
        nbrs.validate(v)?;
        if vu.shape() != [cin, m] {
            return Err(Error::Shape {
                op: "feast_conv",
                left: vu.shape().to_vec(),
                right: vec![cin, m],
            });
        }
        let mut ux = vec![0.0; v * m];
        gemm(v, cin, m, vx.data(), false, vu.data(), false, &mut ux, false);
        // edge-major for general lists, head-major (M, V, K) for a shared one
        let (probs, ph) = match &*nbrs {
            Neighbors::Shared(keys) => (Vec::new(), shared_head_weights(&ux, m, vc.data(), keys, v)),
            Neighbors::PerNode(_) => (head_weights(&ux, m, vc.data(), &nbrs, v), Vec::new()),
        };
        // w_cat[k, h * out + o] = W[h, k, o]
        let mo = m * cout;
        let mut w_cat = vec![0.0; cin * mo];
        for h in 0..m {
            for k in 0..cin {
                for o in 0..cout {
                    w_cat[k * mo + h * cout + o] = vw.data()[(h * cin + k) * cout + o];
                }
            }
        }
        let mut z = vec![0.0; v * mo];
        gemm(v, cin, mo, vx.data(), false, &w_cat, false, &mut z, false);
        let mut y = vec![0.0; v * cout];
        for yi in y.chunks_mut(cout) {
            yi.copy_from_slice(vb.data());
        }
        if let Neighbors::Shared(keys) = &*nbrs {
            let zk = key_blocks(&z, keys, m, cout, 1.0 / keys.len() as f64);
            for h in 0..m {
                gemm(v, keys.len(), cout, &ph[h], false, &zk[h], false, &mut y, true);
            }
        } else {
            let mut e = 0;
            for i in 0..v {
                let n = nbrs.of(i);
                let inv = 1.0 / n.len() as f64;
                let yi = &mut y[i * cout..(i + 1) * cout];
                for &j in n {
                    for h in 0..m {
                        let f = probs[e * m + h] * inv;
                        let zj = &z[j * mo + h * cout..j * mo + (h + 1) * cout];
                        for (a, b) in yi.iter_mut().zip(zj) {
                            *a += f * b;
                        }
                    }
                    e += 1;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![v, cout], y),
            &[x, p.w, p.u, p.c, p.b],
            Box::new(move |g, ctx| {
                let xs = ctx.value(x).data();
                let us = ctx.value(p.u).data();
                let mut dz = vec![0.0; v * mo];
                let mut dux = vec![0.0; v * m];
                let mut dc = vec![0.0; m];
                let mut dp = vec![0.0; m];
                if let Neighbors::Shared(keys) = &*nbrs {
                    let kk = keys.len();
                    let inv = 1.0 / kk as f64;
                    let zk = key_blocks(&z, keys, m, cout, inv);
                    let mut d = vec![vec![0.0; v * kk]; m];
                    let mut dzk = vec![0.0; kk * cout];
                    for h in 0..m {
                        gemm(v, cout, kk, g, false, &zk[h], true, &mut d[h], false);
                        gemm(kk, v, cout, &ph[h], true, g, false, &mut dzk, false);
                        for (jj, &j) in keys.iter().enumerate() {
                            let dst = &mut dz[j * mo + h * cout..j * mo + (h + 1) * cout];
                            for (a, b) in dst.iter_mut().zip(&dzk[jj * cout..(jj + 1) * cout]) {
                                *a += inv * b;
                            }
                        }
                    }
                    // d becomes the logit gradient p * (dp - p . dp)
                    let mut dot = vec![0.0; v * kk];
                    for h in 0..m {
                        for ((t, a), b) in dot.iter_mut().zip(&ph[h]).zip(&d[h]) {
                            *t += a * b;
                        }
                    }
                    for h in 0..m {
                        for ((dl, a), t) in d[h].iter_mut().zip(&ph[h]).zip(&dot) {
                            *dl = a * (*dl - t);
                        }
                        for (i, row) in d[h].chunks(kk).enumerate() {
                            let s: f64 = row.iter().sum();
                            dux[i * m + h] -= s;
                            dc[h] += s;
                            for (jj, &j) in keys.iter().enumerate() {
                                dux[j * m + h] += row[jj];
                            }
                        }
                    }
                } else {
                    let mut softmax_back = |pe: &[f64], i: usize, j: usize, dp: &[f64]| {
                        let dot: f64 = pe.iter().zip(dp).map(|(a, b)| a * b).sum();
                        for h in 0..m {
                            let dl = pe[h] * (dp[h] - dot);
                            dux[j * m + h] += dl;
                            dux[i * m + h] -= dl;
                            dc[h] += dl;
                        }
                    };
                    let mut e = 0;
                    for i in 0..v {
                        let n = nbrs.of(i);
                        let inv = 1.0 / n.len() as f64;
                        let gi = &g[i * cout..(i + 1) * cout];
                        for &j in n {
                            for h in 0..m {
                                let zj = &z[j * mo + h * cout..j * mo + (h + 1) * cout];
                                dp[h] = inv * gi.iter().zip(zj).map(|(a, b)| a * b).sum::<f64>();
                                let f = probs[e * m + h] * inv;
                                let dzj = &mut dz[j * mo + h * cout..j * mo + (h + 1) * cout];
                                for (d, a) in dzj.iter_mut().zip(gi) {
                                    *d += f * a;
                                }
                            }
                            softmax_back(&probs[e * m..(e + 1) * m], i, j, &dp);
                            e += 1;
                        }
                    }
                }
                if ctx.wants(p.b) {
                    let gb = ctx.grad_mut(p.b);
                    for row in g.chunks(cout) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
                if ctx.wants(p.c) {
                    ctx.accumulate(p.c, &dc);
                }
                if ctx.wants(p.w) {
                    let mut dw_cat = vec![0.0; cin * mo];
                    gemm(cin, v, mo, xs, true, &dz, false, &mut dw_cat, false);
                    let gw = ctx.grad_mut(p.w);
                    for h in 0..m {
                        for k in 0..cin {
                            for o in 0..cout {
                                gw[(h * cin + k) * cout + o] += dw_cat[k * mo + h * cout + o];
                            }
                        }
                    }
                }
                if ctx.wants(p.u) {
                    gemm(cin, v, m, xs, true, &dux, false, ctx.grad_mut(p.u), true);
                }
                if ctx.wants(x) {
                    let gx = ctx.grad_mut(x);
                    gemm(v, mo, cin, &dz, false, &w_cat, true, gx, true);
                    gemm(v, m, cin, &dux, false, us, true, gx, true);
                }
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(tape: &mut Tape, m: usize, cin: usize, cout: usize, seed: f64) -> FeastVars {
        let wave = |n: usize, s: f64| (0..n).map(|i| ((i as f64 + 1.0) * s).sin()).collect::<Vec<_>>();
        FeastVars {
            w: tape.leaf(Tensor::new(&[m, cin, cout], wave(m * cin * cout, seed)).unwrap()),
            u: tape.leaf(Tensor::new(&[cin, m], wave(cin * m, seed + 0.5)).unwrap()),
            c: tape.leaf(Tensor::new(&[m], wave(m, seed + 0.9)).unwrap()),
            b: tape.leaf(Tensor::new(&[cout], wave(cout, seed + 1.3)).unwrap()),
        }
    }

    #[test]
    fn single_head_is_mean_aggregation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 2.0, -1.0, 1.0]).unwrap());
        let p = vars(&mut tape, 1, 2, 2, 0.7);
        let nbrs = Rc::new(Neighbors::PerNode(vec![vec![1, 2], vec![0], vec![0, 1, 2]]));
        let y = tape.feast_conv(x, nbrs.clone(), p).unwrap();
        let (xs, w, b) = (tape.value(x).data(), tape.value(p.w).data(), tape.value(p.b).data());
        for i in 0..3 {
            let n = nbrs.of(i);
            for o in 0..2 {
                let mut s = 0.0;
                for &j in n {
                    s += (0..2).map(|k| xs[j * 2 + k] * w[k * 2 + o]).sum::<f64>();
                }
                let expect = b[o] + s / n.len() as f64;
                assert!((tape.value(y).data()[i * 2 + o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_neighbourhood_names_node() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let p = vars(&mut tape, 2, 2, 1, 0.1);
        let err = tape
            .feast_conv(x, Rc::new(Neighbors::PerNode(vec![vec![0], vec![]])), p)
            .unwrap_err();
        assert!(err.to_string().contains("node 1"), "{err}");
    }

    #[test]
    fn uniform_heads_without_steering() {
        let x = Tensor::new(&[2, 2], vec![0.3, 0.1, -0.5, 0.9]).unwrap();
        let p = feast_head_weights(&x, &Neighbors::Shared(vec![0, 1]), &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3])).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn shared_path_matches_per_node_lists() {
        let keys = vec![3, 0, 4];
        let grads = |nbrs: Neighbors| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(&[5, 3], (0..15).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap());
            let p = vars(&mut tape, 3, 3, 2, 0.4);
            let y = tape.feast_conv(x, Rc::new(nbrs), p).unwrap();
            let w = tape.constant(Tensor::new(&[5, 2], (0..10).map(|i| (i as f64 * 0.71).sin()).collect()).unwrap());
            let t = tape.mul(y, w).unwrap();
            let s = tape.sum(t);
            let g = tape.backward(s);
            let mut out = tape.value(y).data().to_vec();
            for v in [x, p.w, p.u, p.c, p.b] {
                out.extend_from_slice(g.get(v).unwrap());
            }
            out
        };
        let a = grads(Neighbors::Shared(keys.clone()));
        let b = grads(Neighbors::PerNode(vec![keys; 5]));
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12, "{u} {v}");
        }
    }
}
