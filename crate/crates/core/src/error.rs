use thiserror::Error;

pub type Result<T, E = CmtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CmtError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("vector norm {norm:e} is at or below the normalization floor")]
    NearZeroNorm { norm: f64 },

    #[error("degenerate box ({x1}, {y1}, {x2}, {y2})")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("box has zero area in the destination view")]
    BoxOutsideView,

    #[error("empty batch: no objects available for the contrastive loss")]
    EmptyBatch,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("tape was created without gradient recording")]
    NotRecording,

    #[error("non-finite loss at iteration {iter}")]
    Divergence { iter: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {msg}")]
    Format { path: String, msg: String },
}

impl CmtError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CmtError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn format(path: impl AsRef<std::path::Path>, msg: impl ToString) -> Self {
        CmtError::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.to_string(),
        }
    }
}
