//! Reverse-mode differentiation over dense [`Tensor`]s.
//!
//! A [`Tape`] records every operation executed through a [`Var`] handle.
//! Leaves created with [`Tape::param`] receive gradients when
//! [`Var::backward`] runs; tensors created with [`Tape::constant`] (for
//! example frozen encoder weights) never get a gradient buffer.
//!
//! A tape supports exactly one backward pass. Training loops build a fresh
//! tape for every step.
//!
//! ```
//! use magprompt::autodiff::Tape;
//! use magprompt::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::row(&[3.0]));
//! let loss = x.mul(x).unwrap().sum_all();
//! loss.backward().unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
//! ```

mod gradcheck;
mod ops;

use std::cell::{Cell, RefCell};

use thiserror::Error;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use ops::ReduceMode;

use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tensor};

use ops::Op;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("leaky_relu slope must be non-negative, got {0}")]
    NegativeSlope(f64),
    #[error("{op}: index {index} out of range for {bound} rows/segments")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: expected {expected} indices, found {found}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("log of non-positive entry {0}")]
    NonPositiveLog(f64),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("tape already consumed by a backward pass")]
    AlreadyBackpropagated,
    #[error("function value is not finite")]
    NonFinite,
    #[error("finite-difference step must be positive")]
    BadStep,
}

thread_local! {
    static CORRUPT_SEGMENT_SOFTMAX: Cell<bool> = const { Cell::new(false) };
}

/// Test hook for the `verify` command: perturbs every segment-softmax output
/// computed on the current thread.
#[doc(hidden)]
pub fn set_corrupt_segment_softmax(on: bool) {
    CORRUPT_SEGMENT_SOFTMAX.with(|c| c.set(on));
}

pub(crate) fn segment_softmax_corrupted() -> bool {
    CORRUPT_SEGMENT_SOFTMAX.with(Cell::get)
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

struct Inner<S> {
    nodes: Vec<Node<S>>,
    grads: Option<Vec<Option<Tensor<S>>>>,
}

/// Operation record for one differentiation session.
pub struct Tape<S: Scalar> {
    inner: RefCell<Inner<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                grads: None,
            }),
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input; receives no gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Constant, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradient of a trainable leaf after [`Var::backward`]. `None` for
    /// constants, intermediates, or before backward has run.
    pub fn grad(&self, var: Var<'_, S>) -> Option<Tensor<S>> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[var.id];
        if !matches!(node.op, Op::Leaf) {
            return None;
        }
        let grads = inner.grads.as_ref()?;
        grads[var.id].clone()
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        f(&self.inner.borrow().nodes[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    fn backward_from(&self, loss: usize) -> Result<(), AutodiffError> {
        let mut inner = self.inner.borrow_mut();
        if inner.grads.is_some() {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        let shape = inner.nodes[loss].value.shape();
        if shape != [1, 1] {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; n];
        if inner.nodes[loss].requires_grad {
            grads[loss] = Some(Tensor::scalar(S::one()));
        }
        for id in (0..=loss).rev() {
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            ops::backward(
                &inner.nodes,
                id,
                &g,
                &mut |input, contribution| match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                },
            );
        }
        // Every trainable leaf gets a buffer, zero if the loss never reached it.
        for (id, node) in inner.nodes.iter().enumerate() {
            match node.op {
                Op::Leaf => {
                    if grads[id].is_none() {
                        let [r, c] = node.value.shape();
                        grads[id] = Some(Tensor::zeros(r, c));
                    }
                }
                _ => grads[id] = None,
            }
        }
        inner.grads = Some(grads);
        Ok(())
    }
}

/// Handle to a tensor recorded on a [`Tape`].
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<S: Scalar> Copy for Var<'_, S> {}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Tensor<S> {
        self.tape.with_value(self.id, Tensor::clone)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.with_value(self.id, Tensor::shape)
    }

    /// First entry; intended for `1 × 1` results.
    pub fn item(&self) -> S {
        self.tape.with_value(self.id, |t| t.data()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Populates gradients of every trainable leaf. Single-shot per tape.
    pub fn backward(&self) -> Result<(), AutodiffError> {
        self.tape.backward_from(self.id)
    }
}

#[cfg(test)]
mod tests;
