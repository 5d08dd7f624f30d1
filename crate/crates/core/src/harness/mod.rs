//! Desk-scale training harness: datasets, models with pluggable
//! normalization, the training loop, configuration and the multi-arm
//! experiments behind the CLI.

pub mod config;
pub mod data;
pub mod experiments;
pub mod model;
pub mod train;

use crate::activation_norm::NormError;
use crate::constants::ConstantError;
use crate::dynamics::DynamicsError;
use crate::numeric::NumericError;
use crate::weight_norm::WeightNormError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("label {label} in record {record} outside 0..{classes}")]
    LabelOutOfRange { label: i64, record: usize, classes: usize },
    #[error("layer shapes do not chain: {0}")]
    ShapeChain(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged in epoch {epoch} at step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("unknown experiment {0:?}")]
    UnknownExperiment(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    WeightNorm(#[from] WeightNormError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Constant(#[from] ConstantError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
