use thiserror::Error;

pub type Result<T> = std::result::Result<T, DiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    /// An op received inputs whose extents violate its contract.
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("gradient requested of non-scalar node {node} with shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("node {0} does not belong to this graph")]
    ForeignNode(usize),
    #[error("update for `{name}` is not recorded on the graph as a function of its parameter")]
    UnrecordedUpdate { name: String },
}
