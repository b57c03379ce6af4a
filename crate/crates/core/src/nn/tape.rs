//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its output value and a closure
//! that maps the output gradient onto its inputs. Inputs always precede
//! outputs, so a single reverse sweep visits nodes in reverse topological
//! order.

use super::Tensor;

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut Backprop<'_>)>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    is_leaf: bool,
    backward: Option<BackwardFn>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    branches: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            is_leaf: true,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            is_leaf: true,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Order-independent fingerprint of every discrete branch taken so far
    /// (ReLU signs, max arguments, selected subsets). Two evaluations with
    /// equal fingerprints followed the same piecewise-smooth branch.
    pub fn branches(&self) -> u64 {
        self.branches
    }

    pub(crate) fn mark_branches(&mut self, choices: impl IntoIterator<Item = usize>) {
        let salt = (self.nodes.len() as u64) << 40;
        for c in choices {
            self.branches ^= splitmix(salt ^ c as u64);
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. The backward rule is dropped when no parent
    /// needs a gradient.
    pub(crate) fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            is_leaf: false,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from the single-element tensor `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward() needs a scalar output"
        );
        self.backward_with(loss, vec![1.0])
    }

    /// Back-propagates an arbitrary output gradient from `out`.
    pub fn backward_with(&self, out: Var, seed: Vec<f64>) -> Gradients {
        assert_eq!(seed.len(), self.nodes[out.0].value.len());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(seed);
        }
        for i in (0..=out.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let mut ctx = Backprop {
                    nodes: &self.nodes,
                    grads: lower,
                };
                bw(&g, &mut ctx);
            }
            if node.is_leaf {
                upper[0] = Some(g);
            }
        }
        Gradients { grads }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Context handed to backward rules.
pub struct Backprop<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> Backprop<'a> {
    pub fn value(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer of `v`, zero-initialized on first use.
    pub fn grad_mut(&mut self, v: Var) -> &mut [f64] {
        let n = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    pub fn accumulate(&mut self, v: Var, g: &[f64]) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }
}

/// Gradients of leaf values from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor, zeros when `v` did not influence the output.
    pub fn tensor(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}
