use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid shape {0:?}: extents must be >= 1 and rank in 1..=3")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("row {row} has L2 norm {norm:e} below the normalization guard")]
    ZeroNorm { row: usize, norm: f64 },
    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic bytes in tensor file")]
    BadMagic,
    #[error("tensor file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("tensor file has {0} trailing bytes")]
    TrailingData(usize),
    #[error("tensor dimensions overflow: {0}")]
    DimensionOverflow(String),

    #[error("dataset is empty")]
    EmptyDataset,
    #[error("feature dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("duplicate pair_id {0}")]
    DuplicatePairId(u64),
    #[error("malformed manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("category {category} has {available} records, need more than {requested}")]
    Insufficient {
        category: u32,
        available: usize,
        requested: usize,
    },
    #[error("insufficient categories: {0}")]
    InsufficientCategories(String),

    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure stems from invalid user input (config, files,
    /// arguments) rather than from a run that went wrong.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Diverged(_) | Error::Io { .. })
    }
}
