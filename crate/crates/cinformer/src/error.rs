use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or geometry mismatch (both shapes belong in the message).
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Input outside an op's numeric domain (log of negative, div by zero).
    #[error("numeric-domain error: {0}")]
    Domain(String),
    /// Out-of-range or duplicate index.
    #[error("index error: {0}")]
    Index(String),
    /// Invalid configuration value or schema violation.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed input data (bad mask value, shape mismatch between files).
    #[error("data error: {0}")]
    Data(String),
    /// Malformed file format (PGM header, checkpoint framing).
    #[error("format error: {0}")]
    Format(String),
    /// NaN/Inf encountered where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Optimizer/checkpoint state inconsistent with parameters.
    #[error("state error: {0}")]
    State(String),
    /// Misuse of the autodiff API (backward on detached tensor, non-scalar loss).
    #[error("usage error: {0}")]
    Usage(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code contract: 0 success, 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 1,
            Error::Dimension(_)
            | Error::Index(_)
            | Error::Data(_)
            | Error::Format(_)
            | Error::State(_)
            | Error::Io { .. } => 2,
            Error::Domain(_) | Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
