use thiserror::Error;

use crate::problem::ProblemInstance;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Inner projected-gradient loop of the local prox did not reach its tolerance.
    #[error("prox inner loop stopped after {iterations} iterations with gradient-mapping residual {residual:e}")]
    InnerSolver { iterations: usize, residual: f64 },

    #[error("agent {agent} failed in round {round}: {source}")]
    Agent {
        agent: usize,
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("divergence detected at round {round}: {reason}")]
    Divergence { round: usize, reason: String },

    #[error("centralized solver stopped after {iterations} iterations with residual {residual:e}")]
    Oracle { iterations: usize, residual: f64 },

    #[error("no instance with an active box constraint after {attempts} attempts")]
    ActiveBoxesExhausted {
        attempts: usize,
        last: Box<ProblemInstance>,
    },

    #[error("{0}")]
    Unsupported(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
