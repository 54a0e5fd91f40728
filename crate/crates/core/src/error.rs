use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum PagError {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid panel: {0}")]
    Panel(String),

    #[error("segment too short: {0}")]
    TooShort(String),

    #[error("degenerate series: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl PagError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        PagError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PagError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            PagError::Shape { .. } => "shape",
            PagError::NonScalarRoot(_) => "non_scalar_root",
            PagError::Io { .. } => "io",
            PagError::Csv { .. } => "csv",
            PagError::Graph(_) => "graph",
            PagError::Panel(_) => "panel",
            PagError::TooShort(_) => "too_short",
            PagError::Degenerate(_) => "degenerate",
            PagError::Config(_) => "config",
            PagError::Diverged(_) => "diverged",
            PagError::Metric(_) => "metric",
            PagError::Checkpoint(_) => "checkpoint",
        }
    }
}

pub type Result<T, E = PagError> = std::result::Result<T, E>;
