use std::path::PathBuf;

use crate::trainer::StepLog;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown config key `{key}`{}", suggestion_suffix(.suggestion))]
    UnknownKey { key: String, suggestion: Option<String> },

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("non-finite loss at iteration {} (L_x={}, L_u={})", .log.iteration, .log.loss_sup, .log.loss_cons)]
    NonFiniteLoss { log: Box<StepLog>, dump: Option<PathBuf> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn suggestion_suffix(s: &Option<String>) -> String {
    match s {
        Some(s) => format!(" (did you mean `{s}`?)"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
