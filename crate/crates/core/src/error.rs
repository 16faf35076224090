use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the avatar engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("invalid template: {0}")]
    Template(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("render error: {0}")]
    Render(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("denoiser error: {0}")]
    Denoiser(String),

    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error("stage `{stage}` requires checkpoint {}", .path.display())]
    MissingCheckpoint { stage: String, path: PathBuf },

    #[error("format error in {}: {msg}", .path.display())]
    Format { path: PathBuf, msg: String },

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 2 for validation-type failures,
    /// 3 for numerical aborts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::MissingCheckpoint { .. }
            | Error::Format { .. }
            | Error::Mesh(_)
            | Error::Template(_)
            | Error::InvalidArgument(_)
            | Error::Dimension(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
