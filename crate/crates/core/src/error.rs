use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite state at frame {frame}, node {node}")]
    NonFinite { frame: usize, node: usize },

    #[error("mark-space truncation breached: |u| = {value} exceeds A = {bound}")]
    TruncationBreach { value: f64, bound: f64 },

    #[error("{0} is not strictly increasing on the support window")]
    NotMonotone(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> LabError {
    LabError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
