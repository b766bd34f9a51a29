use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced (first at flat index {index})")]
    NonFinite { op: &'static str, index: usize },

    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            detail: detail.into(),
        }
    }

    /// Name of the primitive that raised the error.
    pub fn op(&self) -> &'static str {
        match self {
            TensorError::Shape { op, .. }
            | TensorError::NonFinite { op, .. }
            | TensorError::Invalid { op, .. } => op,
        }
    }
}
