//! Dense `f64` tensors, a reverse-mode tape, Adam, and seeded randomness.
//!
//! Everything trainable in the crate is expressed with the primitives on
//! [`Tape`]: matmul, add, subtract, multiply, scale, relu, tanh, sigmoid,
//! softmax, sum, mean, squared-L2, concat, slice, transpose and reshape.

mod adam;
pub mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{NamedTensor, ParamSnapshot, ParamStore, PARAMS_FORMAT_VERSION};
pub use rng::SplitRng;
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("{op} at node {node}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, node: usize, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op} at node {node} produced a non-finite value")]
    NonFinite { op: &'static str, node: usize },
    #[error("slice {start}..{end} out of bounds for length {len} at node {node}")]
    SliceBounds { node: usize, start: usize, end: usize, len: usize },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("backward requested for node {0}, which is not on the tape")]
    NotRecorded(usize),
    #[error("backward needs at least one seeded output")]
    EmptyBackward,
    #[error("seed for node {node} has shape {got:?}, expected {expected:?}")]
    SeedShape { node: usize, expected: Vec<usize>, got: Vec<usize> },
    #[error("non-finite gradient for parameter `{param}` at optimizer step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("parameter `{0}` missing or with wrong shape")]
    UnknownParam(String),
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("unsupported parameter container version {0}")]
    Version(u32),
}
