use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Variants map onto the CLI exit codes: validation-like errors exit with 1,
/// numeric failures with 2 and I/O failures with 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {field}: {message}")]
    Schema { field: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("fit diverged at step {step}: {message}")]
    Fit { step: usize, message: String },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Contract(_)
            | Error::Config(_)
            | Error::Schema { .. }
            | Error::Format(_) => 1,
            Error::NonFinite { .. } | Error::Fit { .. } | Error::GradCheck(_) => 2,
            Error::Io { .. } => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
