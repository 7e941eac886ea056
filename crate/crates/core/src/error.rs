//! Error type shared across the crate.

use std::path::PathBuf;

/// Errors produced by the fetalbet library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Underlying I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// NIfTI parsing or encoding failure.
    #[error("nifti error: {0}")]
    Nifti(#[from] nifti::NiftiError),

    /// CSV parsing failure (manifests, reports).
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// The file was read but its contents are not what the pipeline accepts.
    #[error("format error: {0}")]
    Format(String),

    /// Input data violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Caller violated an API precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Array shapes are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Architecture planning rejected the input geometry.
    #[error("planning error: {0}")]
    Plan(String),

    /// Checkpoint file could not be read, written, or reconciled with a model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training or evaluation configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// Training aborted (for example on a non-finite loss).
    #[error("training error: {0}")]
    Train(String),

    /// Paired test on differences with zero variance.
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
