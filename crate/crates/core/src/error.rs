use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("shape mismatch at node {node} ({op}{label}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        label: String,
        detail: String,
    },

    #[error("unbound graph input `{0}`")]
    Unbound(String),

    #[error("backward requires a scalar output, node {node} has shape {shape:?}")]
    NotScalar { node: usize, shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("joint {joint} lies at or behind the camera plane (depth {depth} mm)")]
    BehindCamera { joint: usize, depth: f64 },

    #[error("degenerate pose: {0}")]
    Degenerate(String),

    #[error("dataset format: {0}")]
    Format(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss {value} at batch {batch}")]
    NonFiniteLoss { batch: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
