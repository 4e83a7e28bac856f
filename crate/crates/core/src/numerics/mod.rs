//! Minimal reverse-mode autodiff over dense row-major tensors.

mod gradcheck;
mod graph;
pub mod kernels;
mod rng;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{AttentionLayout, Graph, Var};
pub use rng::RngStream;
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: zero-norm row {row}")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("non-finite value in {what} at coordinate {coord}")]
    NonFinite { what: String, coord: usize },
}
