use thiserror::Error;

use crate::router::RoutingOutcome;

pub type Result<T, E = ShuntError> = std::result::Result<T, E>;

/// Every failure the cascade can surface.
///
/// The variants line up with the process exit codes used by the CLI:
/// validation-type failures (domain, protocol, config, io) exit with 1,
/// transport with 2 and training with 3.
#[derive(Debug, Error)]
pub enum ShuntError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training error: {message}")]
    Training {
        message: String,
        /// Parameters from the last epoch that finished with finite losses.
        last_good: Option<Box<crate::distillation::LinearSoftmaxClassifier>>,
    },

    /// The large tier failed; `fallback` holds the best small-tier answer.
    #[error("routing error for sample {}: {message}", fallback.sample_id)]
    Routing {
        message: String,
        fallback: Box<RoutingOutcome>,
    },

    #[error("distillation infeasible: {0}")]
    Infeasible(String),

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<ShuntError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error class, used for wire transport and exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Validation,
    Transport,
    Training,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 1,
            ErrorKind::Transport => 2,
            ErrorKind::Training => 3,
        }
    }
}

impl ShuntError {
    pub fn domain(msg: impl Into<String>) -> Self {
        ShuntError::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        ShuntError::Config(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        ShuntError::Protocol(msg.into())
    }

    pub fn training(msg: impl Into<String>) -> Self {
        ShuntError::Training {
            message: msg.into(),
            last_good: None,
        }
    }

    /// Wraps `self` with the name of the pipeline or experiment stage that failed.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        ShuntError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            ShuntError::Transport { .. } | ShuntError::Routing { .. } => ErrorKind::Transport,
            ShuntError::Training { .. } | ShuntError::Infeasible(_) => ErrorKind::Training,
            ShuntError::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Validation,
        }
    }

    /// Transport failures are the only retryable class.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ShuntError::Transport { .. })
    }
}
