//! Unidirectional and bidirectional LSTM as fused tape operations.
//!
//! Gate layout inside the `4H` axis is `[input, forget, cell, output]`.

use super::linalg::gemm;
use super::ops::sigmoid;
use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Parameters of one LSTM direction: `w_ih: (C, 4H)`, `w_hh: (H, 4H)`, `b: (4H)`.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
}

impl Tape {
    /// Runs one LSTM direction over `seq: (T, C)` from zero state and
    /// returns the hidden states `(T, H)` in sequence order.
    pub fn lstm(&mut self, seq: Var, p: LstmVars, reverse: bool) -> Result<Var> {
        let (vx, wih, whh, vb) = (self.value(seq), self.value(p.w_ih), self.value(p.w_hh), self.value(p.b));
        if vx.ndim() != 2 || wih.ndim() != 2 || wih.dim(0) != vx.dim(1) {
            return Err(Error::Shape {
                op: "lstm",
                left: vx.shape().to_vec(),
                right: wih.shape().to_vec(),
            });
        }
        let (t_len, c) = (vx.dim(0), vx.dim(1));
        let g4 = wih.dim(1);
        let h = g4 / 4;
        if g4 % 4 != 0 || whh.shape() != [h, g4] || vb.shape() != [g4] {
            return Err(Error::Shape {
                op: "lstm",
                left: whh.shape().to_vec(),
                right: vec![h, g4],
            });
        }
        let mut pre = Vec::with_capacity(t_len * g4);
        for _ in 0..t_len {
            pre.extend_from_slice(vb.data());
        }
        gemm(t_len, c, g4, vx.data(), false, wih.data(), false, &mut pre, true);

        // per step: gates (activated) and cell state
        let mut gates = vec![0.0; t_len * g4];
        let mut cells = vec![0.0; t_len * h];
        let mut hs = vec![0.0; t_len * h];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        let whh_d = whh.data();
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut a = vec![0.0; g4];
        for &t in &order {
            a.copy_from_slice(&pre[t * g4..(t + 1) * g4]);
            for (k, &hv) in h_prev.iter().enumerate() {
                if hv != 0.0 {
                    let row = &whh_d[k * g4..(k + 1) * g4];
                    for (av, wv) in a.iter_mut().zip(row) {
                        *av += hv * wv;
                    }
                }
            }
            let gt = &mut gates[t * g4..(t + 1) * g4];
            for j in 0..h {
                let i_g = sigmoid(a[j]);
                let f_g = sigmoid(a[h + j]);
                let c_g = a[2 * h + j].tanh();
                let o_g = sigmoid(a[3 * h + j]);
                gt[j] = i_g;
                gt[h + j] = f_g;
                gt[2 * h + j] = c_g;
                gt[3 * h + j] = o_g;
                let cv = f_g * c_prev[j] + i_g * c_g;
                cells[t * h + j] = cv;
                hs[t * h + j] = o_g * cv.tanh();
            }
            c_prev.copy_from_slice(&cells[t * h..(t + 1) * h]);
            h_prev.copy_from_slice(&hs[t * h..(t + 1) * h]);
        }
        let out = Tensor::from_parts(vec![t_len, h], hs.clone());
        Ok(self.push(
            out,
            &[seq, p.w_ih, p.w_hh, p.b],
            Box::new(move |g, ctx| {
                let vx = ctx.value(seq).data();
                let wih = ctx.value(p.w_ih).data();
                let whh = ctx.value(p.w_hh).data();
                let mut da_all = vec![0.0; t_len * g4];
                let mut dh_next = vec![0.0; h];
                let mut dc_next = vec![0.0; h];
                for (step, &t) in order.iter().enumerate().rev() {
                    let prev = if step > 0 { Some(order[step - 1]) } else { None };
                    let gt = &gates[t * g4..(t + 1) * g4];
                    let da = &mut da_all[t * g4..(t + 1) * g4];
                    for j in 0..h {
                        let dh = g[t * h + j] + dh_next[j];
                        let cv = cells[t * h + j];
                        let tc = cv.tanh();
                        let (i_g, f_g, c_g, o_g) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                        let c_before = prev.map_or(0.0, |p| cells[p * h + j]);
                        let dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
                        da[j] = dc * c_g * i_g * (1.0 - i_g);
                        da[h + j] = dc * c_before * f_g * (1.0 - f_g);
                        da[2 * h + j] = dc * i_g * (1.0 - c_g * c_g);
                        da[3 * h + j] = dh * tc * o_g * (1.0 - o_g);
                        dc_next[j] = dc * f_g;
                    }
                    // dh_prev = W_hh · da
                    for (k, dv) in dh_next.iter_mut().enumerate() {
                        let row = &whh[k * g4..(k + 1) * g4];
                        *dv = row.iter().zip(da.iter()).map(|(w, d)| w * d).sum();
                    }
                }
                if ctx.wants(p.b) {
                    let gb = ctx.grad_mut(p.b);
                    for row in da_all.chunks(g4) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if ctx.wants(p.w_ih) {
                    gemm(c, t_len, g4, vx, true, &da_all, false, ctx.grad_mut(p.w_ih), true);
                }
                if ctx.wants(seq) {
                    gemm(t_len, g4, c, &da_all, false, wih, true, ctx.grad_mut(seq), true);
                }
                if ctx.wants(p.w_hh) {
                    // h_{t-1} in processing order pairs with da_t
                    let gw = ctx.grad_mut(p.w_hh);
                    for step in 1..order.len() {
                        let (t, tp) = (order[step], order[step - 1]);
                        let hp = &hs[tp * h..(tp + 1) * h];
                        let da = &da_all[t * g4..(t + 1) * g4];
                        for (k, &hv) in hp.iter().enumerate() {
                            let row = &mut gw[k * g4..(k + 1) * g4];
                            for (acc, d) in row.iter_mut().zip(da) {
                                *acc += hv * d;
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Bidirectional LSTM: `(T, C) -> (T, 2H)` with the forward direction's
    /// state in the first `H` columns.
    pub fn bilstm(&mut self, seq: Var, fwd: LstmVars, bwd: LstmVars) -> Result<Var> {
        let f = self.lstm(seq, fwd, false)?;
        let b = self.lstm(seq, bwd, true)?;
        self.concat_last(&[f, b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| 0.5 * ((i as f64 + 1.0) * seed).sin()).collect()
    }

    fn vars(tape: &mut Tape, c: usize, h: usize, seed: f64) -> LstmVars {
        LstmVars {
            w_ih: tape.leaf(Tensor::new(&[c, 4 * h], pseudo(c * 4 * h, seed)).unwrap()),
            w_hh: tape.leaf(Tensor::new(&[h, 4 * h], pseudo(h * 4 * h, seed + 0.3)).unwrap()),
            b: tape.leaf(Tensor::new(&[4 * h], pseudo(4 * h, seed + 0.7)).unwrap()),
        }
    }

    /// Scalar-loop LSTM written from the cell equations.
    fn oracle(x: &[f64], t_len: usize, c: usize, h: usize, w_ih: &[f64], w_hh: &[f64], b: &[f64], reverse: bool) -> Vec<f64> {
        let mut out = vec![0.0; t_len * h];
        let mut hp = vec![0.0; h];
        let mut cp = vec![0.0; h];
        let steps: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
        for t in steps {
            let mut hn = vec![0.0; h];
            let mut cn = vec![0.0; h];
            for j in 0..h {
                let gate = |q: usize| {
                    let col = q * h + j;
                    let mut s = b[col];
                    for k in 0..c {
                        s += x[t * c + k] * w_ih[k * 4 * h + col];
                    }
                    for k in 0..h {
                        s += hp[k] * w_hh[k * 4 * h + col];
                    }
                    s
                };
                let i = sigmoid(gate(0));
                let f = sigmoid(gate(1));
                let g = gate(2).tanh();
                let o = sigmoid(gate(3));
                cn[j] = f * cp[j] + i * g;
                hn[j] = o * cn[j].tanh();
            }
            out[t * h..(t + 1) * h].copy_from_slice(&hn);
            hp = hn;
            cp = cn;
        }
        out
    }

    #[test]
    fn matches_scalar_oracle() {
        let (t_len, c, h) = (3, 2, 4);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[t_len, c], pseudo(t_len * c, 0.9)).unwrap());
        let pf = vars(&mut tape, c, h, 0.2);
        let pb = vars(&mut tape, c, h, 1.1);
        let y = tape.bilstm(x, pf, pb).unwrap();
        let xs = tape.value(x).data().to_vec();
        let f = oracle(&xs, t_len, c, h, tape.value(pf.w_ih).data(), tape.value(pf.w_hh).data(), tape.value(pf.b).data(), false);
        let b = oracle(&xs, t_len, c, h, tape.value(pb.w_ih).data(), tape.value(pb.w_hh).data(), tape.value(pb.b).data(), true);
        let yv = tape.value(y);
        for t in 0..t_len {
            for j in 0..h {
                assert!((yv.data()[t * 2 * h + j] - f[t * h + j]).abs() < 1e-10);
                assert!((yv.data()[t * 2 * h + h + j] - b[t * h + j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_step_directions_agree() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 3], vec![0.3, -0.2, 0.9]).unwrap());
        let p = vars(&mut tape, 3, 2, 0.4);
        let y = tape.bilstm(x, p, p).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[..2], &d[2..]);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[4, 2], pseudo(8, 0.3)).unwrap());
        let z = LstmVars {
            w_ih: tape.leaf(Tensor::zeros(&[2, 12])),
            w_hh: tape.leaf(Tensor::zeros(&[3, 12])),
            b: tape.leaf(Tensor::zeros(&[12])),
        };
        let y = tape.bilstm(x, z, z).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
