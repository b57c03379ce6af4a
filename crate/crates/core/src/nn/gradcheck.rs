//! Central-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub eps: f64,
    /// Caps the coordinates checked per input; `None` checks all of them.
    pub max_coords: Option<usize>,
    /// Seeds the coordinate subset when `max_coords` applies.
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose perturbation switched a ReLU or max branch.
    pub skipped: usize,
    /// `(input, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
}

/// Gradients below this are compared in absolute terms: central
/// differences of an O(1) objective carry about 1e-11 of round-off.
pub const ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(ERROR_FLOOR, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(ERROR_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor], grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if grad { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Invalid(format!("gradient check needs a scalar output, got {:?}", v.shape())));
    }
    if !v.item().is_finite() {
        return Err(Error::NonFinite("gradient check objective".into()));
    }
    Ok((tape, vars, out))
}

/// Compares tape gradients of the scalar function `f` with central
/// differences at `inputs`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], opts: &CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    for (i, t) in inputs.iter().enumerate() {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("gradient check input {i}")));
        }
    }
    let (tape, vars, out) = eval(&f, inputs, true)?;
    let base = tape.branches();
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.tensor(&tape, v)).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = CheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = rand::seq::index::sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let x0 = input.data()[c];
            probe[i].data_mut()[c] = x0 + opts.eps;
            let (tp, _, op) = eval(&f, &probe, false)?;
            probe[i].data_mut()[c] = x0 - opts.eps;
            let (tm, _, om) = eval(&f, &probe, false)?;
            probe[i].data_mut()[c] = x0;
            if tp.branches() != base || tm.branches() != base {
                report.skipped += 1;
                continue;
            }
            let numeric = (tp.value(op).item() - tm.value(om).item()) / (2.0 * opts.eps);
            let err = relative_error(analytic[i].data()[c], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}

/// Single-input form returning the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let opts = CheckOptions {
        eps,
        ..CheckOptions::default()
    };
    Ok(check_gradients(|t, v| f(t, v[0]), std::slice::from_ref(x), &opts)?.max_rel_err)
}
