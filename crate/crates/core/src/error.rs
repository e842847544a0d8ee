use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BpregError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BpregError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed volume {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("no feasible training item in volume {volume}: {reason}")]
    Sampling { volume: String, reason: String },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("reference table unusable: {0}")]
    Reference(String),
    #[error("score curve is empty after cleaning")]
    EmptyCurve,
    #[error("known region removes every slice ({removed} slices outside [{s_min}, {s_max}])")]
    EmptyCrop {
        removed: usize,
        s_min: f64,
        s_max: f64,
    },
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl BpregError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BpregError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        BpregError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
