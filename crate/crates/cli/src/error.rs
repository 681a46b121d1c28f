use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Engine(#[from] hilora::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// A config value that the engine would not catch up front.
    #[error("configuration error: field `{field}`: {message}")]
    Field { field: &'static str, message: String },

    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("gradient check failed: max relative error {max:.3e} exceeds {tolerance:.1e}")]
    Gradcheck { max: f64, tolerance: f64 },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        CliError::Json {
            path: path.into(),
            source,
        }
    }

    pub fn field(field: &'static str, message: impl Into<String>) -> Self {
        CliError::Field {
            field,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
