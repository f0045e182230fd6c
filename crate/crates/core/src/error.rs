use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {message} (state {state:?})")]
    Numeric { message: String, state: Vec<f64> },

    #[error("load error in field `{field}`: {reason}")]
    Load { field: &'static str, reason: String },

    #[error("missing artifact: expected {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("stale artifact {}: {reason}", .path.display())]
    StaleArtifact { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>, state: &[f64]) -> Self {
        Error::Numeric {
            message: msg.into(),
            state: state.to_vec(),
        }
    }

    pub fn load(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Load {
            field,
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::Shape(_) => 2,
            Error::Numeric { .. } => 3,
            Error::MissingArtifact(_) | Error::StaleArtifact { .. } => 4,
            Error::Load { .. } | Error::Io(_) => 4,
        }
    }
}
