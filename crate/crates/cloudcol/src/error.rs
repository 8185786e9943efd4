use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation was called under a moisture configuration that does not
    /// support it (e.g. cold-phase rates under a warm configuration).
    #[error("invalid mode: {0}")]
    InvalidMode(String),

    #[error("extent mismatch: {0}")]
    ExtentMismatch(String),

    #[error("invalid config: field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    /// A column kernel failed; the offending column index is attached.
    #[error("column kernel failed at column {column}: {source}")]
    KernelFailed {
        column: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invalid_config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
