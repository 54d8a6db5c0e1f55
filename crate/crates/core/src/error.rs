//! Shared error type for the pipeline crates.

use thiserror::Error;

/// Coarse failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or dimension contract violated.
    #[error("shape error: {0}")]
    Shape(String),

    /// Bad configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset, manifest, or checkpoint content problems.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure (NaN loss, eigensolver non-convergence, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Data(_) | Error::Io(_) | Error::Image(_) => ErrorCategory::Data,
            Error::Shape(_) | Error::Numeric(_) => ErrorCategory::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
