use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown class label `{label}`")]
    UnknownClass { label: String },

    #[error("scene `{scene}` detection {index} has no mixture parameters")]
    MissingMixture { scene: String, index: usize },

    #[error("scene `{scene}` detection {index}: |cos(yaw residual mean)| = {cos:e} is too close to zero")]
    SingularYaw { scene: String, index: usize, cos: f64 },

    #[error("kernel fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("insufficient pool: {required} scenes required, {available} available")]
    InsufficientPool { required: usize, available: usize },

    #[error("state file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invalid round state: {0}")]
    InvalidState(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("missing mixture sidecar {} ({} scene(s) affected)", .paths[0].display(), .paths.len())]
    MissingSidecars { paths: Vec<PathBuf> },

    #[error("round {round} aborted: {source}")]
    RoundAborted {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// The innermost error, looking through aborted rounds.
    pub fn root(&self) -> &Error {
        match self {
            Error::RoundAborted { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
