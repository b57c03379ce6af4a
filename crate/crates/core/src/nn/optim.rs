//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use super::params::{Kind, Params};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr`. Parameters without a
    /// gradient entry still receive weight decay.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let names: Vec<String> = params
            .iter()
            .filter(|(_, k, _)| *k == Kind::Param)
            .map(|(n, _, _)| n.to_string())
            .collect();
        for name in names {
            let t = params.get_mut(&name).expect("listed above");
            let n = t.len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let g = grads.get(&name);
            if let Some(g) = g {
                if g.len() != n {
                    return Err(Error::Shape {
                        op: "adam",
                        left: vec![g.len()],
                        right: vec![n],
                    });
                }
            }
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                *w -= lr * (update + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Params::new();
        p.insert("x", Kind::Param, Tensor::from_vec(vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..3000 {
            let x = p.get("x").unwrap().data().to_vec();
            let g: BTreeMap<_, _> = [("x".to_string(), x.iter().map(|v| 2.0 * v).collect())].into();
            opt.step(&mut p, &g, 0.05).unwrap();
        }
        assert!(p.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Params::new();
        p.insert("x", Kind::Param, Tensor::from_vec(vec![1.0]));
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let g: BTreeMap<_, _> = [("x".to_string(), vec![0.3])].into();
        opt.step(&mut p, &g, 0.01).unwrap();
        assert!((p.get("x").unwrap().item() - 0.99).abs() < 1e-6);
    }
}
