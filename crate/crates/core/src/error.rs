use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("{op} expects {expected} input(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable does not belong to this graph")]
    DetachedGraph,
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("pixel ({row}, {col}) is not interior to a {height}x{width} image")]
    OutOfBorder {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("LDP k must be in 1..=8, got {0}")]
    InvalidK(usize),
    #[error("image of {height}x{width} is too small (need at least 3x3)")]
    UndersizedImage { height: usize, width: usize },
    #[error("histogram sets differ: {0}")]
    HistogramMismatch(String),

    #[error("dimension {dim} is not divisible by patch size {patch}")]
    IndivisibleDims { dim: usize, patch: usize },
    #[error("masking ratio {0} outside [0, 1)")]
    RatioOutOfRange(f64),
    #[error("mask plan mismatch: {0}")]
    PlanMismatch(String),
    #[error("inconsistent dimensions: {0}")]
    InconsistentDims(String),

    #[error("unknown backbone preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid preset: {0}")]
    InvalidPreset(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value encountered: {0}")]
    NumericFailure(String),

    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("empty input")]
    EmptyInput,
    #[error("both classes must be present to build a ROC curve")]
    SingleClass,
    #[error("sweep grid incomplete: {0}")]
    IncompleteGrid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Csv {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: unsupported image format ({msg})")]
    UnsupportedFormat { path: PathBuf, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NumericFailure(_) => ErrorKind::Numeric,
            Error::Io { .. }
            | Error::Csv { .. }
            | Error::UnsupportedFormat { .. }
            | Error::Checkpoint(_)
            | Error::LabelOutOfRange { .. }
            | Error::EmptySplit(_)
            | Error::UndersizedImage { .. }
            | Error::IndivisibleDims { .. } => ErrorKind::Data,
            _ => ErrorKind::Usage,
        }
    }
}
