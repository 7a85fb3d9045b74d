use thiserror::Error;

/// Errors raised by the simulator core.
#[derive(Debug, Error)]
pub enum FedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty shard: the mean loss is undefined for {0}")]
    EmptyShard(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("divergence at round {round}, device {device}: {detail}")]
    Divergence {
        round: usize,
        device: usize,
        detail: String,
    },

    #[error("divergence at round {round}: non-finite server model")]
    ServerDivergence { round: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data in {path}: {detail}")]
    Parse { path: String, detail: String },
}

impl FedError {
    pub fn config(msg: impl Into<String>) -> Self {
        FedError::InvalidConfig(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        FedError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Attach round/device context to a divergence raised without it.
    pub fn with_location(self, round: usize, device: usize) -> Self {
        match self {
            FedError::Divergence { detail, .. } => FedError::Divergence {
                round,
                device,
                detail,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, FedError>;
