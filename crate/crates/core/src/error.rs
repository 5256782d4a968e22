//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by network construction, training, data loading and
/// compression runs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("layer {layer}: shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: usize,
        expected: String,
        got: String,
    },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: String,
        offset: u64,
        message: String,
    },

    #[error("{path}: checksum mismatch (file is corrupted)")]
    Checksum { path: String },

    #[error("{path}: unsupported format version {found}, expected {expected}")]
    Version {
        path: String,
        found: String,
        expected: String,
    },

    #[error("mask layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
