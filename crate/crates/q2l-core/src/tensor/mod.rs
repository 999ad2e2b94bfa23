//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to an immutable buffer plus an
//! optional gradient slot. Ops record backward closures on a thread-local
//! [`Tape`]; [`Tensor::backward`] drains the tape and accumulates gradients
//! into every tensor that requires them.

mod ops;
mod scalar;
mod serial;
mod tape;

pub use scalar::Scalar;
pub use serial::{read_tensor, read_tensor_file, write_tensor, write_tensor_file, SerialError};
pub use tape::{grad_enabled, no_grad, Tape};

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

/// Errors from tensor construction, shape-checked ops, and backward.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: range {start}..{end} invalid for axis extent {extent}")]
    InvalidRange {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("{op}: needs at least one input")]
    EmptyInput { op: &'static str },
    #[error("backward target has {numel} elements, expected a scalar")]
    NotScalar { numel: usize },
    #[error("backward target is detached from the tape")]
    Detached,
}

struct Inner<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
}

/// Handle to an immutable n-dimensional array; clones share the buffer.
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar> Tensor<S> {
    pub(crate) fn new_internal(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DimensionMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::new_internal(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new_internal(shape.to_vec(), vec![S::ZERO; numel], false)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self::new_internal(shape.to_vec(), vec![value; numel], false)
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Self::new_internal(Vec::new(), vec![value], false)
    }

    /// Deep copy marked as a trainable leaf (`requires_grad = true`).
    pub fn trainable(&self) -> Self {
        Self::new_internal(self.inner.shape.clone(), self.inner.data.clone(), true)
    }

    /// Deep copy cut off from the tape (`requires_grad = false`).
    pub fn detached(&self) -> Self {
        Self::new_internal(self.inner.shape.clone(), self.inner.data.clone(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[S] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.inner.data[0]
    }

    /// Current gradient, if any has been accumulated.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    /// Clears the gradient slot. Callers zero grads between optimizer steps;
    /// backward always accumulates on top of what is present.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds `delta` into the gradient slot. No-op unless `requires_grad`.
    pub(crate) fn accumulate_grad(&self, delta: &[S]) {
        if !self.inner.requires_grad {
            return;
        }
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Whether ops consuming this tensor should record backward closures.
    pub(crate) fn tracked(&self) -> bool {
        self.inner.requires_grad && tape::grad_enabled()
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Seeds `d loss/d loss = 1`, drains the thread tape, and runs the
    /// recorded closures newest-first. Gradients sum across fan-out; tensors
    /// recorded since the last backward but not connected to this loss
    /// receive nothing.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar { numel: self.numel() });
        }
        if !self.inner.requires_grad {
            return Err(TensorError::Detached);
        }
        self.accumulate_grad(&[S::ONE]);
        let entries = S::with_tape(Tape::take_entries);
        for entry in entries.into_iter().rev() {
            entry();
        }
        Ok(())
    }
}
