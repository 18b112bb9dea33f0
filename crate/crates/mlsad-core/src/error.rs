//! Error types shared across the pipeline.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad caller-supplied values: shapes, ranges, empty inputs.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation was invoked before its prerequisites exist
    /// (untrained generator, missing checkpoint, absent level).
    #[error("missing dependency: {0}")]
    MissingDependency(String),

    /// Iterative fitting failed to reach tolerance.
    #[error("no convergence after {sweeps} sweeps (residual {residual:.3e})")]
    Convergence { sweeps: usize, residual: f64 },

    /// A numerical step produced non-finite values.
    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("ingestion failed for {}: {reason}", .files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    Ingestion { files: Vec<PathBuf>, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Nn(#[from] mlsad_nn::NnError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Error::MissingDependency(msg.into())
    }
}
