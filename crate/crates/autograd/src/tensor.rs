//! The [`Tensor`] handle and the graph node it points at.
//!
//! A tensor is an immutable, reference-counted node. Values never change after
//! construction; "updating" a parameter means replacing the handle. Nodes
//! produced by an op while gradient recording is enabled keep their inputs
//! alive together with the backward rule, forming the DAG that
//! [`crate::grad`] walks.

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether ops on this thread currently record graph nodes.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording switched to `enabled`, restoring the previous
/// mode afterwards (also on unwind).
pub fn with_grad_mode<T>(enabled: bool, f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(enabled)));
    f()
}

/// Runs `f` without recording any graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    with_grad_mode(false, f)
}

/// Vector-Jacobian product rule of a recorded op.
///
/// `needs[i]` tells whether the gradient of input `i` is wanted; rules may
/// return `None` for inputs that are not needed. The rule must be written in
/// terms of tensor ops so that, when recording is enabled, the returned
/// gradients are differentiable again.
pub(crate) trait Backward: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>>;
}

pub(crate) struct GradFn {
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) rule: Box<dyn Backward>,
}

pub(crate) struct Node {
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) grad_fn: Option<GradFn>,
}

impl Drop for Node {
    // Unrolled graphs can be thousands of nodes deep; release them iteratively.
    fn drop(&mut self) {
        let Some(gf) = self.grad_fn.take() else {
            return;
        };
        let mut stack = gf.inputs;
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Arc::try_unwrap(t.0) {
                if let Some(gf) = node.grad_fn.take() {
                    stack.extend(gf.inputs);
                }
            }
        }
    }
}

/// N-dimensional row-major `f64` array participating in a computation graph.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a leaf tensor. `requires_grad` defaults to `false`.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expected = numel_of(shape);
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor::leaf(shape.to_vec(), Arc::new(data), false))
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(Vec::new(), Arc::new(vec![value]), false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::leaf(shape.to_vec(), Arc::new(vec![value; numel_of(shape)]), false)
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad_fn: None,
        }))
    }

    /// Wraps the result of an op, recording a graph node when recording is
    /// enabled and any input requires grad.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        rule: impl Backward + 'static,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len(), "{}", rule.name());
        let track = is_grad_enabled() && inputs.iter().any(Tensor::requires_grad);
        let grad_fn = track.then(|| GradFn {
            inputs,
            rule: Box::new(rule),
        });
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Arc::new(data),
            requires_grad: track,
            grad_fn,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True for tensors not produced by a recorded op.
    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the op that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.rule.name())
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// A leaf sharing this tensor's buffer, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), Arc::clone(&self.0.data), false)
    }

    /// A leaf sharing this tensor's buffer with the given `requires_grad` flag.
    pub fn leaf_with_grad(&self, requires_grad: bool) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), Arc::clone(&self.0.data), requires_grad)
    }

    pub(crate) fn id(&self) -> usize {
        self.0.id
    }

    /// Identity of the underlying node; equal for clones of the same handle.
    pub fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        s.field("requires_grad", &self.0.requires_grad);
        if let Some(op) = self.op_name() {
            s.field("op", &op);
        }
        s.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction() {
        let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(!t.requires_grad());

        let empty = Tensor::new(&[0], vec![]).unwrap();
        assert_eq!(empty.numel(), 0);

        let err = Tensor::new(&[2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { expected: 2, actual: 3, .. }));
    }

    #[test]
    fn grad_mode_restores() {
        assert!(is_grad_enabled());
        no_grad(|| {
            assert!(!is_grad_enabled());
            with_grad_mode(true, || assert!(is_grad_enabled()));
            assert!(!is_grad_enabled());
        });
        assert!(is_grad_enabled());
    }

    #[test]
    fn detach_shares_buffer() {
        let p = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().leaf_with_grad(true);
        let d = p.detach();
        assert!(!d.requires_grad());
        assert!(Arc::ptr_eq(&p.0.data, &d.0.data));
    }

    #[test]
    fn tensors_are_send_and_sync() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Tensor>();
    }
}
