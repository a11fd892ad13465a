//! The tape: node storage, forward value access, and the backward walk.

use super::ops::{self, Op};
use super::tensor::TensorData;
use super::Real;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Cheap to copy; only meaningful for the
/// tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(super) usize);

pub(super) struct Node<T: Real> {
    pub value: TensorData<T>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// Eager reverse-mode tape. Ops compute forward values immediately and
/// record enough to run [`Tape::backward`] later. Nodes are append-only, so
/// a tape is topologically ordered by construction.
pub struct Tape<T: Real> {
    pub(super) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: TensorData<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Inserts a non-differentiable input (data, masks, constants).
    pub fn constant(&mut self, value: TensorData<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf_from(&mut self, data: &[T], shape: &[usize]) -> Result<Var> {
        Ok(self.leaf(TensorData::new(data.to_vec(), shape)?))
    }

    pub fn constant_from(&mut self, data: &[T], shape: &[usize]) -> Result<Var> {
        Ok(self.constant(TensorData::new(data.to_vec(), shape)?))
    }

    pub fn value(&self, v: Var) -> &TensorData<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(super) fn push(&mut self, value: TensorData<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-accumulates d`loss`/d`node` for every node that `loss`
    /// depends on. `loss` must be scalar.
    ///
    /// Differentiable leaves that `loss` does not touch get explicit zero
    /// gradients, so optimizers can treat [`Gradients`] as total.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lnode = &self.nodes[loss.0];
        if lnode.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lnode.value.shape()),
            ));
        }
        let mut grads: Vec<Option<TensorData<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(TensorData::full(lnode.value.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || grads[idx].is_none() {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let g = grads[idx].take().expect("grad present");
            ops::backward_op(self, idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(TensorData::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward pass: per-node gradients, dense over the nodes the
/// loss reached (plus zeros for untouched differentiable leaves).
pub struct Gradients<T> {
    grads: Vec<Option<TensorData<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&TensorData<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf the optimizer owns; errors if absent.
    pub fn expect(&self, v: Var) -> Result<&TensorData<T>> {
        self.get(v)
            .ok_or_else(|| Error::Invariant(format!("missing gradient for node {}", v.0)))
    }
}

/// Ensures a gradient slot exists and returns its data for accumulation.
pub(super) fn acc_slot<'a, T: Real>(
    grads: &'a mut [Option<TensorData<T>>],
    idx: usize,
    shape: &[usize],
) -> &'a mut [T] {
    grads[idx].get_or_insert_with(|| TensorData::zeros(shape)).data_mut()
}
