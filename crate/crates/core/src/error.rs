use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch norm `{0}` has no running statistics; run at least one training step first")]
    MissingRunningStats(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}: \
         reconstruction={reconstruction}, auxiliary={auxiliary}, total={total}"
    )]
    NonFiniteLoss { epoch: usize, batch: usize, reconstruction: f64, auxiliary: f64, total: f64 },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("method `{method}` failed on image {image}: {source}")]
    MethodFailed {
        method: String,
        image: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Pnm(#[from] PnmError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable identifier, used in machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::MissingRunningStats(_) => "missing-running-stats",
            Error::NonScalarLoss(_) => "non-scalar-loss",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::UnknownParameter(_) => "unknown-parameter",
            Error::MethodFailed { .. } => "method-failed",
            Error::Pnm(e) => e.kind(),
            Error::Checkpoint(e) => e.kind(),
            Error::Config(_) => "config",
            Error::File { .. } | Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PnmError {
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },
    #[error("unsupported maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

impl PnmError {
    pub fn kind(&self) -> &'static str {
        match self {
            PnmError::BadMagic { .. } => "pnm-bad-magic",
            PnmError::UnsupportedMaxval(_) => "pnm-unsupported-maxval",
            PnmError::Header(_) => "pnm-header",
            PnmError::Truncated { .. } => "pnm-truncated",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("tensor `{name}` spans bytes {offset}..{end} but the payload holds {payload}")]
    OffsetOutOfRange { name: String, offset: u64, end: u64, payload: u64 },
    #[error("tensor `{name}` has shape {shape:?} but {bytes} payload bytes")]
    LengthMismatch { name: String, shape: Vec<usize>, bytes: u64 },
    #[error("invalid manifest: {0}")]
    Manifest(String),
}

impl CheckpointError {
    pub fn kind(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic => "checkpoint-bad-magic",
            CheckpointError::VersionMismatch { .. } => "checkpoint-version-mismatch",
            CheckpointError::Truncated(_) => "checkpoint-truncated",
            CheckpointError::OffsetOutOfRange { .. } => "checkpoint-offset-out-of-range",
            CheckpointError::LengthMismatch { .. } => "checkpoint-length-mismatch",
            CheckpointError::Manifest(_) => "checkpoint-manifest",
        }
    }
}
