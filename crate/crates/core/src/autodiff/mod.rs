//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every value computed in one forward pass. Operations
//! are methods on the tape that take and return [`Var`] handles; calling
//! [`Tape::backward`] on a scalar var fills in gradients for the leaves
//! created with `requires_grad`. [`Tape::stop_gradient`] copies a value
//! onto the tape as a constant so nothing upstream of it receives
//! gradient through that path.
//!
//! A tape is a single-threaded context. It is `Send`, so a whole run can
//! move to another thread, and independent tapes can run in parallel.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{analytic_grad, finite_diff_check};
pub use tape::{Tape, Var, LOG_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("invalid geometry in {op}: {reason}")]
    InvalidGeometry { op: &'static str, reason: String },
    #[error("range {start}..{end} out of bounds for extent {extent}")]
    OutOfBounds {
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}
