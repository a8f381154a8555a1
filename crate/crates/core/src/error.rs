use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error in branch {branch}: {message}")]
    Numeric { branch: usize, message: String },

    #[error("resource limit exceeded: {message}")]
    Resource {
        message: String,
        /// Largest depth that fits the budget, when the limit is a tree depth.
        max_depth: Option<usize>,
    },

    #[error("expansion check failed at x={x:?}, y={y:?}: ratio {ratio} below {required}")]
    ExpansionWitness {
        x: Vec<f64>,
        y: Vec<f64>,
        ratio: f64,
        required: f64,
    },

    #[error("power iteration did not converge after {iterations} iterations (last change {last_change:e})")]
    NonConvergence { iterations: usize, last_change: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

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

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Resource { .. } => 3,
            Error::Config(_) | Error::Json(_) => 4,
            _ => 1,
        }
    }
}
