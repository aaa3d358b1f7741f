use thiserror::Error;

/// Errors raised anywhere in the search engine.
#[derive(Debug, Error)]
pub enum DassError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("optimizer error: {0}")]
    Optim(String),

    #[error("numeric abort: non-finite loss {loss} in phase {phase} (epoch {epoch}, batch {batch}, lr {lr})")]
    NonFinite {
        phase: &'static str,
        epoch: usize,
        batch: usize,
        lr: f32,
        loss: f32,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("dataset format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("genotype error: {0}")]
    Genotype(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint config hash mismatch: checkpoint has {found}, current config has {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl DassError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        DassError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        DassError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DassError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by user input (bad config, missing files).
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            DassError::Config { .. }
                | DassError::Invalid(_)
                | DassError::Genotype(_)
                | DassError::ConfigHashMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, DassError>;
