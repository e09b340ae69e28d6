use std::path::PathBuf;

use thiserror::Error;

use crate::backend::BackendError;
use crate::prompts::ParseError;
use crate::types::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("environment: {0}")]
    Env(String),

    #[error("no trajectories")]
    NoTrajectories,

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("{path}: line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("credit assignment failed for trajectory {trajectory_id}: {source}")]
    CreditFailure {
        trajectory_id: String,
        #[source]
        source: ParseError,
    },

    #[error(
        "gradient estimation failed for agent {agent} on trajectory {trajectory_id}: {source}"
    )]
    GradientFailure {
        trajectory_id: String,
        agent: usize,
        #[source]
        source: ParseError,
    },

    #[error("policy update failed for agent {agent}: {source}")]
    UpdateFailure {
        agent: usize,
        #[source]
        source: ParseError,
    },

    /// An episode aborted; the steps taken so far are kept for debugging.
    #[error("episode with seed {seed} aborted: {source}")]
    Episode {
        seed: u64,
        partial: Box<Trajectory>,
        #[source]
        source: Box<Error>,
    },

    /// A rollout batch failed; trajectories finished before the failure are kept.
    #[error("rollout batch failed: {source}")]
    Batch {
        completed: Vec<Trajectory>,
        #[source]
        source: Box<Error>,
    },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn env(msg: impl Into<String>) -> Self {
        Error::Env(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
