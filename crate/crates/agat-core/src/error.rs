//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgatError {
    /// Tensor shapes incompatible with the attempted operation.
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    /// A primitive produced NaN or Inf.
    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    /// Malformed or out-of-range configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset files or dataset contents violated a format contract.
    #[error("data error: {0}")]
    Data(String),

    /// A training run aborted (divergence guard, bad inner loop, ...).
    #[error("training aborted: {0}")]
    Train(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl AgatError {
    pub fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        AgatError::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>, detail: impl Into<String>) -> Self {
        AgatError::NonFinite {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        AgatError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, AgatError>;
