//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every forward primitive; [`Tape::backward`] replays
//! the adjoints. Model weights live in a [`ParamStore`] and are bound onto
//! a fresh tape each step.

mod adam;
mod checkpoint;
pub(crate) mod conv;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, DEFAULT_LR};
pub use checkpoint::Checkpoint;
pub use conv::conv_out_len;
pub use params::{Param, ParamStore};
pub use tape::{BatchStats, Segments, Tape, Var, CHAMFER_WEIGHT_FLOOR};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
