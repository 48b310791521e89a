//! Dense `f64` tensors and the reverse-mode tape used by every model and loss.

mod array;
mod gemm;
mod optim;
mod tape;

pub use array::Tensor;
pub use optim::{sgd_step, ParamStore};
pub use tape::{Gradients, Tape, Var, LOG_EPS, NORM_EPS};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: String },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NonScalar { op: &'static str, shape: Vec<usize> },
    #[error("backward called on a tape recorded without gradients")]
    GradDisabled,
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("invalid learning rate {0}")]
    InvalidLearningRate(f64),
}
