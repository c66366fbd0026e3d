use std::path::PathBuf;

use face_diffcore::DiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, FaceError>;

#[derive(Debug, Error)]
pub enum FaceError {
    #[error(transparent)]
    Graph(#[from] DiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("dataset: {0}")]
    Load(String),
    #[error("subject `{subject}`: non-finite value at offset {offset}")]
    NonFinite { subject: String, offset: usize },
    #[error("subject `{subject}`: class {class} has {have} samples, {need} required")]
    InsufficientSamples {
        subject: String,
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("invalid electrode map: {0}")]
    ElectrodeMap(String),
    #[error("adjacency row {row} sums to zero; the degree matrix is singular")]
    SingularDegree { row: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage} diverged: {detail}")]
    Diverged { stage: &'static str, detail: String },
    #[error("{0}")]
    Precondition(String),
}

impl FaceError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FaceError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        FaceError::Json {
            path: path.into(),
            source,
        }
    }
}
