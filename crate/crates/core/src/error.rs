use thiserror::Error;

use crate::arch::ArchError;
use crate::data::DataError;

/// Errors raised when running networks and losses on concrete arrays.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{what} has {found} planes, expected {expected}")]
    PlaneMismatch { what: &'static str, expected: usize, found: usize },
    #[error("bad dimensions: {0}")]
    Dims(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("scale {scale}, tap {tap}: real features {real:?} vs synthesized {fake:?}")]
    TapMismatch { scale: usize, tap: usize, real: Vec<usize>, fake: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
}
