//! Named parameter storage and the per-forward binding context.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{BnLayout, BnMode, BnStats};
use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// BN running-statistics momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Param,
    /// Non-trainable state such as BN running statistics.
    Buffer,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: BTreeMap<String, (Kind, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: Kind, t: Tensor) {
        self.entries.insert(name.into(), (kind, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|(_, t)| t)
    }

    pub fn kind(&self, name: &str) -> Option<Kind> {
        self.entries.get(name).map(|(k, _)| *k)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Kind, &Tensor)> {
        self.entries.iter().map(|(n, (k, t))| (n.as_str(), *k, t))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(_, k, _)| *k == Kind::Param).map(|(n, _, t)| (n, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalar count of trainable parameters.
    pub fn num_scalars(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Sets every trainable tensor under `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, (kind, t)) in self.entries.iter_mut() {
            if *kind == Kind::Param && name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn add_affine(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        self.insert(format!("{name}.w"), Kind::Param, he_normal(&[fan_in, fan_out], fan_in, rng));
        self.insert(format!("{name}.b"), Kind::Param, Tensor::zeros(&[fan_out]));
    }

    pub fn add_batch_norm(&mut self, name: &str, channels: usize) {
        self.insert(format!("{name}.gamma"), Kind::Param, Tensor::full(&[channels], 1.0));
        self.insert(format!("{name}.beta"), Kind::Param, Tensor::zeros(&[channels]));
        self.insert(format!("{name}.mean"), Kind::Buffer, Tensor::zeros(&[channels]));
        self.insert(format!("{name}.var"), Kind::Buffer, Tensor::full(&[channels], 1.0));
    }

    /// Folds batch statistics into the running statistics of `name`.
    pub fn update_running(&mut self, name: &str, stats: &BnStats) -> Result<()> {
        for (suffix, batch) in [("mean", &stats.mean), ("var", &stats.var)] {
            let key = format!("{name}.{suffix}");
            let t = self
                .get_mut(&key)
                .ok_or_else(|| Error::Invalid(format!("missing buffer `{key}`")))?;
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
        Ok(())
    }
}

/// Zero-mean normal entries with variance `2 / fan_in`.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Binds parameters to a tape for one forward pass. Parameters become
/// leaves on first use, or constants when gradients are not needed.
pub struct Ctx<'t, 'p> {
    pub tape: &'t mut Tape,
    params: &'p Params,
    bound: HashMap<String, Var>,
    pub mode: Mode,
    grads: bool,
    stats: Vec<(String, BnStats)>,
}

impl<'t, 'p> Ctx<'t, 'p> {
    pub fn new(tape: &'t mut Tape, params: &'p Params, mode: Mode, grads: bool) -> Self {
        Self {
            tape,
            params,
            bound: HashMap::new(),
            mode,
            grads,
            stats: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    /// Uses `var` for parameter `name` instead of a fresh leaf.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.require(name)?.clone();
        let v = if self.grads { self.tape.leaf(t) } else { self.tape.constant(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter variables bound so far, by name.
    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.bound
    }

    pub fn affine(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        self.tape.affine(x, w, b)
    }

    pub fn batch_norm(&mut self, x: Var, name: &str, layout: BnLayout) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, gamma, beta, layout, BnMode::Train)?;
                if let Some(s) = stats {
                    self.stats.push((name.to_string(), s));
                }
                Ok(y)
            }
            Mode::Infer => {
                let mean = self.params.require(&format!("{name}.mean"))?;
                let var = self.params.require(&format!("{name}.var"))?;
                let mode = BnMode::Infer {
                    mean: mean.data(),
                    var: var.data(),
                };
                Ok(self.tape.batch_norm(x, gamma, beta, layout, mode)?.0)
            }
        }
    }

    /// Batch statistics gathered in training mode, in call order.
    pub fn take_stats(&mut self) -> Vec<(String, BnStats)> {
        std::mem::take(&mut self.stats)
    }
}
