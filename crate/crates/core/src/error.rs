use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the fine-tuning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected length {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: parse error at byte offset {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("not enough adversarial candidates: {}", format_shortfall(.0))]
    Shortfall(Vec<LabelShortfall>),

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Missing adversarial examples for one label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelShortfall {
    pub label: usize,
    pub required: usize,
    pub available: usize,
}

fn format_shortfall(items: &[LabelShortfall]) -> String {
    items
        .iter()
        .map(|s| format!("label {} has {} of {}", s.label, s.available, s.required))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: usize, got: usize) -> Self {
        Error::Shape { expected, got }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
