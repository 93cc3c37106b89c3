use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer dimension mismatch between layers {left} and {right}: output {left_out} != input {right_in}")]
    LayerMismatch {
        left: usize,
        right: usize,
        left_out: usize,
        right_in: usize,
    },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("batch of {0} rows is too small for batch normalization in train mode (need at least 2)")]
    BatchTooSmall(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("no cached forward pass: run a train-mode forward on this batch before requesting gradients")]
    NoForwardCache,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("exemplar budget {budget} exceeds the {available} available samples")]
    BudgetTooLarge { budget: usize, available: usize },

    #[error("label {0} is already present in the support set")]
    DuplicateLabel(u32),

    #[error("label {0} is not known to the support set")]
    UnknownLabel(u32),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported bundle format version {found} (expected {expected})")]
    BundleVersion { found: u32, expected: u32 },

    #[error("bundle checksum mismatch: manifest says {expected}, payload hashes to {actual}")]
    BundleChecksum { expected: String, actual: String },

    #[error("bundle shape error: {0}")]
    BundleShape(String),

    #[error("malformed bundle manifest: {0}")]
    BundleManifest(String),

    #[error("I/O error at {path}: {source}")]
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

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::LayerMismatch { .. } | Error::InvalidNetwork(_) => "network",
            Error::BatchTooSmall(_) => "batch_too_small",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::NoForwardCache => "protocol",
            Error::Config(_) => "config",
            Error::Empty(_) => "empty",
            Error::BudgetTooLarge { .. } => "budget",
            Error::DuplicateLabel(_) => "duplicate_label",
            Error::UnknownLabel(_) => "unknown_label",
            Error::Dataset(_) => "dataset",
            Error::Parse { .. } => "parse",
            Error::BundleVersion { .. } => "bundle_version",
            Error::BundleChecksum { .. } => "bundle_checksum",
            Error::BundleShape(_) => "bundle_shape",
            Error::BundleManifest(_) => "bundle_manifest",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
