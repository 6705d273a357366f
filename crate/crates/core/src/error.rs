use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("degenerate random draw: column {column} has norm {norm:e} after orthogonalization")]
    DegenerateDraw { column: usize, norm: f64 },

    #[error("eigendecomposition did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (max |grad| = {max_abs_grad:e})"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        max_abs_grad: f64,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
