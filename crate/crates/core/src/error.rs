use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value left the finite double-precision range.
    #[error("range error at coordinate {coord}: {context}")]
    Range { coord: usize, context: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: expected dimension {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("convergence error: {0}")]
    Convergence(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attaches the engine iteration to a range error so aborted runs report
    /// where they stopped.
    pub(crate) fn at_iteration(self, t: usize) -> Self {
        match self {
            Error::Range { coord, context } => Error::Range {
                coord,
                context: format!("iteration {t}: {context}"),
            },
            other => other,
        }
    }
}
