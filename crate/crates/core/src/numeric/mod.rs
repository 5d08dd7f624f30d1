//! Dense tensors with F64, F32 and emulated binary16 element behaviour.

mod exec;
pub mod half;
pub mod io;
mod precision;
mod rng;
mod tensor;

pub use exec::Execution;
pub use half::{round_half, HALF_MAX};
pub use precision::{Accumulator, Element, PrecisionMode};
pub use rng::Rng;
pub use tensor::{sign, top_k_indices, BinaryOp, Operand, ReduceOp, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("data length {actual} does not match shape element count {expected}")]
    InvalidLength { expected: usize, actual: usize },
    #[error("value {value} at index {index} is not representable in {precision}")]
    NotRepresentable { index: usize, value: f64, precision: PrecisionMode },
    #[error("precision mismatch: {left} vs {right}")]
    PrecisionMismatch { left: PrecisionMode, right: PrecisionMode },
    #[error("invalid precision mode: {0}")]
    InvalidPrecision(String),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("axis {axis} is empty")]
    EmptyAxis { axis: usize },
    #[error("k = {k} outside 1..={len}")]
    KOutOfRange { k: usize, len: usize },
    #[error("malformed tensor file at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
