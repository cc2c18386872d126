use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A theorem's precondition does not hold, so its guarantee does not apply.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(
        "calibration failed: target eps {target} is outside the achievable range \
         [{min_eps}, {max_eps}] for sigma in [{sigma_lo}, {sigma_hi}]"
    )]
    Calibration {
        target: f64,
        min_eps: f64,
        max_eps: f64,
        sigma_lo: f64,
        sigma_hi: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
