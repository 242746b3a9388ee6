use std::path::PathBuf;

use thiserror::Error;

use crate::manifest::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Boxed error returned by user-supplied extractors and loaders.
pub type BoxError = Box<dyn std::error::Error + Send + Sync + 'static>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate key `{key}` at line {line}")]
    DuplicateKey { key: String, line: usize },

    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("missing manifest file `{0}`")]
    MissingManifest(String),

    #[error("data directory failed validation with {} violation(s): {}", .0.len(), summarize(.0))]
    ValidationFailure(Vec<Violation>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("index {index} out of range for dataset of length {len}")]
    IndexError { index: usize, len: usize },

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("extractor for field `{field}` failed on item `{id}`: {cause}")]
    ExtractionError { field: String, id: String, cause: BoxError },

    #[error("schema error: {0}")]
    SchemaError(String),

    #[error("unsupported shape {shape:?} for field `{field}` (rank must be 1 or 2)")]
    UnsupportedShape { field: String, shape: Vec<usize> },

    #[error("cannot finalize statistics with zero frames")]
    EmptyStats,

    #[error("non-finite gradient for `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("incompatible checkpoint: config hash {found} does not match {expected}")]
    IncompatibleCheckpoint { expected: String, found: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no parameter matched LoRA target patterns {0:?}")]
    NoTargetsMatched(Vec<String>),

    #[error("model carries no LoRA adapters")]
    NotAdapted,

    #[error("factor {factor} outside [{min}, {max}]")]
    BadFactor { factor: f64, min: f64, max: f64 },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("malformed registry: {0}")]
    MalformedRegistry(String),

    #[error("checksum mismatch for `{id}`: expected {expected}, got {actual}")]
    ChecksumMismatch {
        id: String,
        expected: String,
        actual: String,
    },

    #[error("download of {url} failed: {reason}")]
    DownloadError { url: String, reason: String },

    #[error("unknown label `{0}`")]
    LabelError(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("audio error: {0}")]
    Audio(String),
}

fn summarize(violations: &[Violation]) -> String {
    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
