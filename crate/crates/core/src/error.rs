use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = StmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum StmError {
    /// Tensor extents or ranks do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Inputs violate a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl StmError {
    pub fn dim(msg: impl Into<String>) -> Self {
        StmError::Dimension(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        StmError::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        StmError::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        StmError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Prefixes the message with `context`, keeping the error class.
    pub fn context(self, context: impl std::fmt::Display) -> Self {
        match self {
            StmError::Dimension(m) => StmError::Dimension(format!("{context}: {m}")),
            StmError::Validation(m) => StmError::Validation(format!("{context}: {m}")),
            StmError::Numeric(m) => StmError::Numeric(format!("{context}: {m}")),
            StmError::Format { path, message } => StmError::Format {
                path,
                message: format!("{context}: {message}"),
            },
            io @ StmError::Io { .. } => io,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            StmError::Dimension(_) | StmError::Validation(_) => 1,
            StmError::Io { .. } | StmError::Format { .. } => 2,
            StmError::Numeric(_) => 3,
        }
    }
}
