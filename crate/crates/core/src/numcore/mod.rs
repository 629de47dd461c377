//! Dense tensors, a reverse-mode autodiff tape, and a finite-difference
//! gradient checker.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck};
pub use graph::{inject_backward_fault, Gradients, Graph, OpKind, Var};
pub use params::{init, Param, ParamId, ParamStore};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Seeded generator used everywhere randomness enters a run.
pub type Rng = ChaCha8Rng;

/// Deterministically derives an independent generator from a run seed and a
/// stream tag.
pub fn rng_for(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero-sized dimension")]
    EmptyDim(Vec<usize>),
    #[error("{op}: rank {rank} < {needed}")]
    RankTooLow { op: &'static str, rank: usize, needed: usize },
    #[error("invalid axes {axes:?} for shape {shape:?}")]
    BadAxes { shape: Vec<usize>, axes: Vec<usize> },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("length {len} is not divisible by {by}")]
    NotDivisible { len: usize, by: usize },
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("row {row} has norm {norm:e} below 1e-12")]
    DegenerateRow { row: usize, norm: f64 },
    #[error("function returned a non-finite value while probing {param}")]
    NonFinite { param: String },
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
}
