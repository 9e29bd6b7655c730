//! Reverse-mode automatic differentiation over dynamic-dimensional `f64` tensors.
//!
//! A [`Tape`] records operations eagerly (define-by-run): every op computes its
//! value immediately and appends a node describing how to backpropagate through
//! it. Calling [`Tape::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients for every node that (transitively) depends on a
//! parameter leaf.
//!
//! Trainable state lives outside the tape in a [`ParamStore`]; a fresh tape is
//! built per step and parameter leaves are bound with [`Tape::param`]. This
//! keeps forward passes on frozen parameters trivially safe to run in parallel
//! while serializing mutation in the optimizer step.
//!
//! Everything is `f64`: the consumers of this crate verify gradients against
//! central finite differences with steps around 1e-5, which is below f32
//! resolution.

mod ops;
mod store;

pub mod check;

pub use ops::{broadcast_shapes, Op};
pub use store::{Adam, ParamId, ParamStore};

use ndarray::{ArrayD, IxDyn};

pub type Arr = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub value: Arr,
    pub op: Op,
    pub needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Grads {
    by_node: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient of a node, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zero(&self, tape: &Tape, v: Var) -> Arr {
        match self.by_node[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Arr::zeros(tape.nodes[v.0].value.raw_dim()),
        }
    }
}

/// An eager operation tape. See the crate docs.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "scalar() called on node of shape {:?}", a.shape());
        *a.iter().next().unwrap()
    }

    pub(crate) fn push(&mut self, value: Arr, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not require gradients.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, Op::Const, false)
    }

    /// A non-parameter leaf that still accumulates a gradient, for checking
    /// sensitivities with respect to inputs.
    pub fn input(&mut self, value: Arr) -> Var {
        self.push(value, Op::Const, true)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Arr::from_elem(IxDyn(&[]), x))
    }

    /// Bind a parameter from `store` as a gradient-requiring leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Detach: re-enter a node's value as a constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Reverse pass from a scalar `loss` node. Panics if `loss` is not 0-d /
    /// single element.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward() requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let mut by_node: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        by_node[loss.0] = Some(Arr::ones(self.nodes[loss.0].value.raw_dim()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                by_node[id] = None;
                continue;
            }
            let Some(grad) = by_node[id].take() else { continue };
            ops::backward_node(self, id, &grad, &mut by_node);
            by_node[id] = Some(grad);
        }
        Grads { by_node }
    }

    /// Accumulate parameter-leaf gradients from `grads` into the store.
    pub fn accumulate_param_grads(&self, grads: &Grads, store: &mut ParamStore) {
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = grads.by_node[id].as_ref() {
                    store.add_grad(pid, g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
