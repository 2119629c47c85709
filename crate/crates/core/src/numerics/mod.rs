//! Dense `f64` tensors with tape-based reverse-mode differentiation, a
//! central-difference gradient oracle, and an Adam optimizer.

mod gradcheck;
pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::{clip_global_norm, AdamConfig, OptimizerState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tape already consumed by a backward pass; reset it first")]
    SpentTape,
    #[error("contract violation: {0}")]
    Contract(String),
}
