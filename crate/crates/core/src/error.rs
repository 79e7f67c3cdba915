use std::path::PathBuf;

/// Errors surfaced by the library. Each maps onto one CLI exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument outside the documented domain of an operation.
    #[error("invalid input: {0}")]
    InputDomain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("singular matrix in {0}")]
    Singular(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Self::InputDomain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::Data { path: path.into(), msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self::Numeric(msg.into())
    }

    /// Process exit code: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InputDomain(_) | Error::Config(_) | Error::Unsupported(_) => 2,
            Error::Data { .. } | Error::Io { .. } => 3,
            Error::Singular(_) | Error::Numeric(_) => 4,
        }
    }
}
