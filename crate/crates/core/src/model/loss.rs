//! Weighted per-cell cross-entropy over labeled top-view cells.

use crate::config::FlatConfig;
use crate::dataio::ClassMap;
use crate::labels::SemanticGrid;
use crate::nn::ops::{log_sum_exp, softmax_in_place};
use crate::nn::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossForm {
    /// `-lambda_k log p_k` of the true class.
    MultiClass,
    /// `-sum_c [lambda y_c log p_c + (1 - lambda)(1 - y_c) log(1 - p_c)]`
    /// with `lambda` of the true class, summed over all channels.
    LiteralBinary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegLossConfig {
    /// Weight per output channel.
    pub weights: Vec<f64>,
    pub form: LossForm,
}

impl SegLossConfig {
    pub fn uniform(channels: usize) -> Self {
        Self {
            weights: vec![1.0; channels],
            form: LossForm::MultiClass,
        }
    }

    /// Vehicle weighted 5 for sparse supervision and 2 for dense, every
    /// other class 1.
    pub fn defaults(map: &ClassMap, dense: bool) -> Self {
        let weights = map
            .supervised()
            .into_iter()
            .map(|k| match map.name(k) {
                "vehicle" if dense => 2.0,
                "vehicle" => 5.0,
                _ => 1.0,
            })
            .collect();
        Self {
            weights,
            form: LossForm::MultiClass,
        }
    }

    /// Overrides the defaults with `loss.weight.<class>` and
    /// `loss.form = multiclass | binary`.
    pub fn from_config(cfg: &FlatConfig, map: &ClassMap, dense: bool) -> Result<Self> {
        let base = Self::defaults(map, dense);
        let mut weights = Vec::with_capacity(base.weights.len());
        for (c, k) in map.supervised().into_iter().enumerate() {
            let w: f64 = cfg.parse_or(&format!("loss.weight.{}", map.name(k)), base.weights[c])?;
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight of `{}` must be positive", map.name(k))));
            }
            weights.push(w);
        }
        let form = match cfg.get("loss.form").unwrap_or("multiclass") {
            "multiclass" => LossForm::MultiClass,
            "binary" => LossForm::LiteralBinary,
            other => return Err(Error::Config(format!("unknown loss form `{other}`"))),
        };
        Ok(Self { weights, form })
    }
}

/// Output channel of every cell of `grid`, `None` for unlabeled cells.
pub fn cell_targets(grid: &SemanticGrid, map: &ClassMap) -> Vec<Option<usize>> {
    grid.labels.iter().map(|&l| map.channel_of(l)).collect()
}

impl Tape {
    /// Mean over labeled cells of the weighted cross-entropy of `logits`
    /// `(K, H, W)` against per-cell channel targets.
    pub fn seg_loss(&mut self, logits: Var, targets: &[Option<usize>], cfg: &SegLossConfig) -> Result<Var> {
        let v = self.value(logits);
        if v.ndim() != 3 || v.dim(1) * v.dim(2) != targets.len() || v.dim(0) != cfg.weights.len() {
            return Err(Error::Shape {
                op: "seg_loss",
                left: v.shape().to_vec(),
                right: vec![cfg.weights.len(), targets.len()],
            });
        }
        let (k, hw) = (v.dim(0), targets.len());
        let labeled: Vec<(usize, usize)> = targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|c| (i, c)))
            .collect();
        if labeled.is_empty() {
            return Err(Error::Invalid("segmentation loss over zero labeled cells".into()));
        }
        if let Some(&(i, c)) = labeled.iter().find(|(_, c)| *c >= k) {
            return Err(Error::Invalid(format!("cell {i} targets channel {c} of {k}")));
        }
        let inv_m = 1.0 / labeled.len() as f64;
        let d = v.data();
        let mut probs = vec![0.0; labeled.len() * k];
        let mut total = 0.0;
        for (n, &(i, t)) in labeled.iter().enumerate() {
            let p = &mut probs[n * k..(n + 1) * k];
            for c in 0..k {
                p[c] = d[c * hw + i];
            }
            let log_pt = d[t * hw + i] - log_sum_exp(p);
            softmax_in_place(p);
            let lam = cfg.weights[t];
            total += match cfg.form {
                LossForm::MultiClass => -lam * log_pt,
                LossForm::LiteralBinary => {
                    let mut s = -lam * log_pt;
                    for c in (0..k).filter(|&c| c != t) {
                        s -= (1.0 - lam) * (-p[c]).ln_1p();
                    }
                    s
                }
            };
        }
        let form = cfg.form;
        let weights = cfg.weights.clone();
        Ok(self.push(
            Tensor::scalar(total * inv_m),
            &[logits],
            Box::new(move |g, ctx| {
                let gl = ctx.grad_mut(logits);
                let s = g[0] * inv_m;
                let mut dp = vec![0.0; k];
                for (n, &(i, t)) in labeled.iter().enumerate() {
                    let p = &probs[n * k..(n + 1) * k];
                    let lam = weights[t];
                    match form {
                        LossForm::MultiClass => {
                            for c in 0..k {
                                let y = if c == t { 1.0 } else { 0.0 };
                                gl[c * hw + i] += s * lam * (p[c] - y);
                            }
                        }
                        LossForm::LiteralBinary => {
                            // dL/dp, then through the softmax Jacobian
                            for c in 0..k {
                                dp[c] = if c == t {
                                    -lam / p[c]
                                } else {
                                    (1.0 - lam) / (1.0 - p[c])
                                };
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for c in 0..k {
                                gl[c * hw + i] += s * p[c] * (dp[c] - dot);
                            }
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

    fn loss(logits: Vec<f64>, k: usize, targets: &[Option<usize>], cfg: &SegLossConfig) -> f64 {
        let mut tape = Tape::new();
        let n = targets.len();
        let x = tape.constant(Tensor::new(&[k, 1, n], logits).unwrap());
        let l = tape.seg_loss(x, targets, cfg).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let l = loss(vec![0.3; 12 * 3], 12, &[Some(0), Some(5), Some(11)], &SegLossConfig::uniform(12));
        assert!((l - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_margin_vanishes() {
        let l = loss(vec![20.0, 0.0], 2, &[Some(0)], &SegLossConfig::uniform(2));
        assert!(l < 1e-3);
    }

    #[test]
    fn unlabeled_cells_ignored_and_required() {
        let cfg = SegLossConfig::uniform(2);
        let a = loss(vec![1.0, 5.0, 0.0, -2.0], 2, &[Some(0), None], &cfg);
        let b = loss(vec![1.0, 0.0], 2, &[Some(0)], &cfg);
        assert!((a - b).abs() < 1e-15);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 1]));
        assert!(tape.seg_loss(x, &[None], &cfg).is_err());
    }

    #[test]
    fn two_cell_weighted_hand_case() {
        // cell 0: logits (1, 0) true 0; cell 1: logits (0.5, 2) true 1
        let cfg = SegLossConfig {
            weights: vec![1.0, 2.0],
            form: LossForm::MultiClass,
        };
        let l = loss(vec![1.0, 0.5, 0.0, 2.0], 2, &[Some(0), Some(1)], &cfg);
        let p0 = 1f64.exp() / (1f64.exp() + 1.0);
        let p1 = 2f64.exp() / (2f64.exp() + 0.5f64.exp());
        let expect = 0.5 * (-p0.ln() - 2.0 * p1.ln());
        assert!((l - expect).abs() < 1e-10);
    }

    #[test]
    fn literal_binary_at_unit_weight() {
        let cfg = SegLossConfig {
            weights: vec![1.0, 1.0, 1.0],
            form: LossForm::LiteralBinary,
        };
        let multi = SegLossConfig::uniform(3);
        let logits = vec![0.2, -0.4, 1.1];
        assert!((loss(logits.clone(), 3, &[Some(1)], &cfg) - loss(logits, 3, &[Some(1)], &multi)).abs() < 1e-15);
    }
}
