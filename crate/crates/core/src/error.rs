use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad input detected before any computation started.
    #[error("configuration error: {0}")]
    Config(String),

    /// The operation is defined but not for the requested boundary / geometry.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Something went wrong inside a numerical kernel (blow-up, failed solve).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Not enough data to form an estimate.
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
