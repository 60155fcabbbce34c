//! Minimal dense-tensor math with reverse-mode differentiation.
//!
//! Everything is `f64` and row-major contiguous. The differentiation tape
//! ([`Tape`]) is define-by-run: ops execute eagerly and record themselves,
//! and one backward sweep fills in gradients. No threads, no SIMD
//! intrinsics, no allocation tricks; determinism and auditability over
//! speed.

pub mod tape;
pub mod tensor;

pub use tape::{Tape, TensorId};
pub use tensor::Tensor;

/// Errors from tensor construction and tape operations.
#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("tensor shape {shape:?} does not match a data buffer of length {data_len}")]
    ShapeDataMismatch { shape: Vec<usize>, data_len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    InvalidConfig(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error("{0}")]
    Usage(String),
}
