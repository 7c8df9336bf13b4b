//! The gradient tape: an append-only arena of computed values.
//!
//! Every forward op pushes one node; node order *is* topological order, so
//! the backward pass is a single reverse sweep. `Var` handles are `Copy` and
//! borrow the tape, which keeps graph wiring allocation-free at the call
//! sites and makes it impossible to use a handle after its tape is gone.
//!
//! Gradients of fan-out nodes accumulate: each consumer contributes its
//! vector-Jacobian product and the tape sums them, so an expression like
//! `x*x + x` differentiates correctly without any caller bookkeeping.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, OpKind};
use crate::tensor::Tensor;

struct Node {
    value: Tensor,
    /// `None` for leaves and constants.
    op: Option<(OpKind, Vec<usize>)>,
    requires_grad: bool,
}

/// Arena of forward values. Create one per training step or decode session;
/// dropping it frees every intermediate at once.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A position in the tape, for truncating back to a known prefix.
#[derive(Debug, Clone, Copy)]
pub struct TapeMark(usize);

/// Handle to one tape node. Cheap to copy; tied to its tape's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of one backward pass, indexed by the vars of the source tape.
#[derive(Debug)]
pub struct Gradients {
    tape_id: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` did not
    /// influence the loss (or was a constant).
    ///
    /// # Panics
    /// If `v` belongs to a different tape than the one backward ran on.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        assert_eq!(
            v.tape as *const Tape as usize, self.tape_id,
            "gradient lookup with a var from another tape"
        );
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records a differentiable leaf (a parameter or an input we want
    /// gradients for).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node { value, op: None, requires_grad: true })
    }

    /// Records a non-differentiable value (data, masks, frozen weights).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node { value, op: None, requires_grad: false })
    }

    /// Current end of the tape; pass to [`Tape::rollback`] to drop everything
    /// recorded after this point.
    pub fn mark(&self) -> TapeMark {
        TapeMark(self.len())
    }

    /// Truncates the tape back to `mark`, freeing the suffix. Vars handed out
    /// after the mark become invalid; using one panics on its next access.
    pub fn rollback(&self, mark: TapeMark) {
        self.nodes.borrow_mut().truncate(mark.0);
    }

    /// Applies `kind` to `inputs`, recording the result.
    pub fn apply<'t>(&'t self, kind: OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        for v in inputs {
            if !std::ptr::eq(v.tape, self) {
                return Err(Error::TensorNotOnTape);
            }
        }
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            let value = ops::forward(&kind, &tensors)?;
            let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
            (value, requires_grad)
        };
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(Node { value, op: Some((kind, ids)), requires_grad }))
    }

    /// Concatenates rank-2 vars along `axis`.
    pub fn concat<'t>(&'t self, inputs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        self.apply(OpKind::Concat { axis }, inputs)
    }

    /// Reverse sweep from `loss`, which must be scalar and live on this tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::TensorNotOnTape);
        }
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::LossNotScalar(nodes[loss.id].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.id).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || grads[idx].is_none() {
                continue;
            }
            let Some((kind, input_ids)) = &node.op else { continue };
            let grad = grads[idx].take().expect("checked above");
            let tensors: Vec<&Tensor> = input_ids.iter().map(|&i| &nodes[i].value).collect();
            let needs: Vec<bool> = input_ids.iter().map(|&i| nodes[i].requires_grad).collect();
            // Contributions go into fresh slots, then merge into the global
            // map; this keeps duplicate inputs (e.g. mul(x, x)) correct.
            let mut contrib: Vec<Option<Tensor>> = (0..input_ids.len()).map(|_| None).collect();
            ops::backward(kind, &tensors, &node.value, &grad, &needs, &mut contrib);
            grads[idx] = Some(grad);
            for (slot, &target) in contrib.into_iter().zip(input_ids) {
                let Some(c) = slot else { continue };
                match &mut grads[target] {
                    Some(existing) => {
                        for (o, v) in existing.data_mut().iter_mut().zip(c.data()) {
                            *o += v;
                        }
                    }
                    empty => *empty = Some(c),
                }
            }
        }
        Ok(Gradients { tape_id: self as *const Tape as usize, grads })
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(node);
        Var { tape: self, id }
    }
}

impl<'t> Var<'t> {
    /// Borrow of the forward value. Drop the borrow before recording new ops.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |nodes| &nodes[self.id].value)
    }

    /// Owned copy of the forward value.
    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Convenience for `tape.backward(self)`.
    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::MatMul, &[self, rhs])
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Add, &[self, rhs])
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Mul, &[self, rhs])
    }

    /// `scale * self + shift`, elementwise.
    pub fn lin(self, scale: f64, shift: f64) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Lin { scale, shift }, &[self])
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Log, &[self])
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Tanh, &[self])
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Sigmoid, &[self])
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Relu, &[self])
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Softmax { axis }, &[self])
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.tape.apply(OpKind::LogSoftmax { axis }, &[self])
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Slice { axis, start, len }, &[self])
    }

    /// Gathers rows of an embedding matrix: `self` is (V×D), result is
    /// (ids.len()×D).
    pub fn embed_lookup(self, ids: Vec<usize>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::EmbedLookup { ids }, &[self])
    }

    /// Applies a mask from [`crate::tensor::dropout_mask`].
    pub fn dropout(self, mask: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Dropout, &[self, mask])
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Sum, &[self])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Mean, &[self])
    }

    /// Scales row i of `self` by `scale[i, 0]`.
    pub fn scale_rows(self, scale: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::ScaleRows, &[self, scale])
    }

    /// Picks `self[i, ids[i]]` into an (n×1) column.
    pub fn gather_cols(self, ids: Vec<usize>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::GatherCols { ids }, &[self])
    }

    /// Repeats the whole row block `times` times: (B×H) -> (times·B)×H.
    pub fn tile_rows(self, times: usize) -> Result<Var<'t>> {
        self.tape.apply(OpKind::TileRows { times }, &[self])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Reshape { shape }, &[self])
    }

    /// Dot products between each memory position and the query rows;
    /// `self` is the (S·B)×H memory, `query` is B×H, result is S×B.
    pub fn attn_scores(self, query: Var<'t>, batch: usize) -> Result<Var<'t>> {
        self.tape.apply(OpKind::AttnScores { batch }, &[self, query])
    }

    /// Weighted sum of memory rows; `self` is the S×B weights, result B×H.
    pub fn attn_context(self, memory: Var<'t>, batch: usize) -> Result<Var<'t>> {
        self.tape.apply(OpKind::AttnContext { batch }, &[self, memory])
    }

    /// Adds weight (s, b) at column `ids[s·B + b]` of a zero (B×width) grid.
    pub fn copy_scatter(self, ids: Vec<usize>, width: usize) -> Result<Var<'t>> {
        self.tape.apply(OpKind::CopyScatter { ids, width }, &[self])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn hand_checked_add_mul_chain() {
        // f(x, y) = sum(x ∘ y + x) at x = [2, 3], y = [5, 7]
        // df/dx = y + 1 = [6, 8]; df/dy = x = [2, 3]
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![2.0, 3.0]).unwrap());
        let y = tape.leaf(Tensor::new(vec![2], vec![5.0, 7.0]).unwrap());
        let loss = x.mul(y).unwrap().add(x).unwrap().sum().unwrap();
        assert_eq!(loss.value().data(), &[2.0 * 5.0 + 2.0 + 3.0 * 7.0 + 3.0]);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0, 8.0]);
        assert_eq!(grads.wrt(y).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn duplicate_input_accumulates() {
        // f(x) = sum(x ∘ x): df/dx = 2x
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let loss = x.mul(x).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = sum(x∘x) + sum(x): df/dx = 2x + 1
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let a = x.mul(x).unwrap().sum().unwrap();
        let b = x.sum().unwrap();
        let loss = a.add(b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::new(vec![2], vec![10.0, 20.0]).unwrap());
        let loss = x.mul(c).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[10.0, 20.0]);
        assert!(grads.wrt(c).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::LossNotScalar(shape) if shape == vec![2, 3]));
    }

    #[test]
    fn cross_tape_use_is_rejected() {
        let tape_a = Tape::new();
        let tape_b = Tape::new();
        let x = tape_a.leaf(Tensor::scalar(1.0));
        let y = tape_b.leaf(Tensor::scalar(2.0));
        assert!(matches!(tape_a.apply(OpKind::Add, &[x, y]), Err(Error::TensorNotOnTape)));
        assert!(matches!(tape_a.backward(y), Err(Error::TensorNotOnTape)));
    }

    #[test]
    fn rollback_truncates_and_tape_is_reusable() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let mark = tape.mark();
        let _t1 = x.tanh().unwrap();
        let _t2 = x.sigmoid().unwrap();
        assert_eq!(tape.len(), 3);
        tape.rollback(mark);
        assert_eq!(tape.len(), 1);
        // The prefix is intact and new work can be recorded.
        let loss = x.mul(x).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[4.0]);
    }
}
