use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The config file or an override could not be parsed.
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// A parsed value violates an invariant.
    #[error("invalid value for `{key}`: {message}")]
    Validation { key: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checkpoint {path} failed its integrity check: {message}")]
    Integrity { path: PathBuf, message: String },

    #[error("checkpoint {path} has format version {found}, expected {expected}")]
    Incompatible {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("non-finite loss at step {step}; diagnostics written to {dump}")]
    NumericalAbort { step: u64, dump: PathBuf },

    #[error("metric is undefined: {0}")]
    UndefinedMetric(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(key: &str, message: impl Into<String>) -> Self {
        Error::Validation {
            key: key.to_string(),
            message: message.into(),
        }
    }
}
