use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("instance `{id}` has an empty mention")]
    EmptyMention { id: String },

    #[error("label `{0}` does not appear in the tier map")]
    UnknownLabel(String),

    #[error("empty embedding table")]
    EmptyEmbeddingTable,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("cannot encode an empty sequence")]
    EmptySequence,

    #[error("{0}: attention over an empty set")]
    EmptyAttention(&'static str),

    #[error("label id {0} has already been emitted")]
    DuplicateEmission(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("label id {id} is out of range for a vocabulary of {size} labels")]
    LabelOutOfRange { id: usize, size: usize },

    #[error("cost matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },

    #[error("attribute proposer failed for instance `{id}`: {message}")]
    Proposer { id: String, message: String },

    #[error("no encoder features for sequence `{0}`")]
    MissingFeatures(String),

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
