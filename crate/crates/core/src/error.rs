use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("not enough classes: need {needed}, dataset has {available}")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("class {class_id} has {available} training samples, {needed} shots requested")]
    InsufficientShots {
        class_id: u32,
        needed: usize,
        available: usize,
    },

    #[error("session index {index} out of range for a stream of {len} sessions")]
    SessionOutOfRange { index: usize, len: usize },

    #[error("a simplex ETF of {k} vectors needs at least {} dimensions, got {d}", .k - 1)]
    DimensionTooSmall { k: usize, d: usize },

    #[error("{classes} classes cannot be assigned to a frame of {rows} vectors")]
    TooManyClasses { classes: usize, rows: usize },

    #[error("duplicate class id {0}")]
    DuplicateClass(u32),

    #[error("class {0} is not covered")]
    UncoveredClass(u32),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("image must be square, got {height}x{width}")]
    NonSquareImage { height: usize, width: usize },

    #[error("invalid view pairing: {0}")]
    InvalidPairing(String),

    #[error("missing loss part `{0}` with non-zero weight")]
    MissingLossPart(String),

    #[error("parameter shape mismatch for `{name}`")]
    ShapeMismatch { name: String },

    #[error("unknown layer prefix `{0}`")]
    UnknownLayer(String),

    #[error("class separation undefined: all embeddings coincide")]
    UndefinedSeparation,

    #[error("zero-length vector")]
    ZeroVector,

    #[error("non-finite loss in {stage} (epoch {epoch})")]
    Divergence { stage: String, epoch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("version mismatch: {0}")]
    VersionMismatch(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
