//! Dense numeric arrays, neural-network primitives, and reverse-mode
//! gradient computation.
//!
//! The centerpiece is [`Tape`]: a record of operations built during a
//! forward pass and replayed in reverse to accumulate gradients. Every
//! training objective in this crate differentiates through it, and
//! [`finite_difference_check`] provides the independent oracle that keeps
//! the backward rules honest.

mod check;
mod kernels;
mod params;
mod tape;
#[cfg(test)]
mod tests;

pub use check::finite_difference_check;
pub use params::Parameters;
pub use tape::{Tape, Var};

pub(crate) use kernels::softmax_row_inplace as softmax_slice;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    DataLength {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: slice [{start}, {start}+{len}) exceeds dimension {dim}")]
    SliceOutOfRange {
        op: &'static str,
        start: usize,
        len: usize,
        dim: usize,
    },
    #[error("backward: root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward: tape has already been traversed; build a fresh tape")]
    BackwardTwice,
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
}

/// Row-major dense array of floats with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor, checking that `data` fills the shape exactly.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::DataLength {
                op: "Tensor::new",
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a differentiation target (builder style).
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient buffer; present after a backward pass reached this tensor.
    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Treats the tensor as a matrix, returning (rows, cols).
    pub fn as_matrix(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::NotAMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Vec<F> {
        if self.grad.is_none() {
            self.grad = Some(vec![F::zero(); self.data.len()]);
        }
        self.grad.as_mut().expect("grad just allocated")
    }
}
