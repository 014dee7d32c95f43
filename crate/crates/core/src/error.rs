//! Crate-wide error type with machine-parseable categories.

use thiserror::Error;

/// Errors surfaced by any operation in this crate.
///
/// Every variant maps to a stable category slug via [`Error::category`];
/// the CLI prints `error[<category>]: <message>` so callers can match on
/// the category without parsing prose.
#[derive(Debug, Error)]
pub enum Error {
    /// Mask geometry cannot satisfy the requested constraints.
    #[error("mask geometry: {0}")]
    Geometry(String),

    /// Tensor or mask shapes are inconsistent.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Invalid or inconsistent configuration.
    #[error("config: {0}")]
    Config(String),

    /// Dataset ingestion or batching failure.
    #[error("data: {0}")]
    Data(String),

    /// Checkpoint encode/decode failure.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A loss term or parameter became NaN/Inf.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable one-word category used in CLI error lines and exit handling.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Geometry(_) => "geometry",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite(_) => "non-finite",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
