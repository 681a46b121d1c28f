use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, out-of-range parameters or invalid settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation's documented precondition does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Input is numerically degenerate where normalization is mandatory.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Synthetic data generation could not satisfy its constraints.
    #[error("data generation failed: {0}")]
    Generation(String),

    /// A protocol stage failed.
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn dims(op: &str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Config(format!(
            "{op}: dimension mismatch {}x{} vs {}x{}",
            lhs.0, lhs.1, rhs.0, rhs.1
        ))
    }

    /// Wraps an error with the protocol stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
