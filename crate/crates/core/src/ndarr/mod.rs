//! Dense tensors with a small reverse-mode differentiation tape.
//!
//! The op set is closed: convolution, batch normalization, linear layers,
//! activations, elementwise arithmetic, nearest upsampling, pooling and
//! reductions. That is enough to express the segmentation network and its
//! losses, and every op has a backward rule that [`grad_check`] can verify
//! against central finite differences in `f64`.

mod gradcheck;
mod graph;
mod linalg;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckOptions, GradCheckReport};
pub use graph::{BnMode, BnRunning, Conv2dOpts, Graph, Var};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised at op boundaries.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} is invalid: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected} channels, found {found}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("conv2d: kernel {kh}x{kw} must have odd sides")]
    EvenKernel { kh: usize, kw: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph has already been consumed by backward")]
    GraphConsumed,
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("function is not deterministic: repeated evaluation gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
}

pub type TensorResult<T> = std::result::Result<T, TensorError>;
