use std::path::PathBuf;

/// Error type for the dataset pipeline, metrics, trainer, and CLI layers.
#[derive(Debug, thiserror::Error)]
pub enum AvqaError {
    #[error(transparent)]
    Core(#[from] avqa_core::CoreError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed {what} at {path}:{line}: {reason}")]
    Malformed {
        what: &'static str,
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("training diverged at step {step}: loss = {loss}; batch items: [{batch}]")]
    Diverged { step: usize, loss: f64, batch: String },
}

pub type Result<T> = std::result::Result<T, AvqaError>;

impl AvqaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AvqaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        AvqaError::Json {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        AvqaError::Config(msg.into())
    }
}
