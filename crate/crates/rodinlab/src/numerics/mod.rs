//! Minimal CPU tensor core: row-major tensors, pure compute kernels, and a
//! tape-based reverse-mode autodiff graph over a fixed op set. Everything else
//! in the crate is built from these pieces.

pub mod tensor;
pub mod kernels;
pub mod graph;
pub mod gradcheck;

pub use graph::{Graph, Gradients, Mode, NodeId, PoolAxis};
pub use tensor::Tensor;

use thiserror::Error;

/// Element type for all in-memory tensors. Tests and gradient checks rely on
/// the 64-bit default; build with `--features f32` for faster training runs.
/// On-disk formats are always 32-bit regardless of this switch.
#[cfg(feature = "f32")]
pub type Real = f32;
#[cfg(not(feature = "f32"))]
pub type Real = f64;

pub const PI: Real = std::f64::consts::PI as Real;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch on {axis}: {detail}")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        detail: String,
    },
    #[error("{op}: non-finite value produced (checked mode)")]
    NonFinite { op: &'static str },
    #[error("{op}: input out of range (checked mode): {detail}")]
    OutOfRange { op: &'static str, detail: String },
}

pub(crate) fn shape_err(
    op: &'static str,
    axis: &'static str,
    detail: String,
) -> NumericsError {
    NumericsError::ShapeMismatch { op, axis, detail }
}
