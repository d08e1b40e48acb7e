use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("malformed JSON in {context}: {message}")]
    MalformedJson { context: String, message: String },
    #[error("answer span starting at char {start} lies outside context of {len} chars")]
    SpanOutsideContext { start: usize, len: usize },
    #[error("split fractions must sum to 1, got {0}")]
    InvalidFractions(f64),
    #[error("split {0} received zero answer groups")]
    EmptySplit(&'static str),
    #[error("pair {0} has no content tokens")]
    EmptyText(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("batching needs at least two distinct answer groups, found {0}")]
    TooFewAnswerGroups(usize),
    #[error("row {0} contains only padding")]
    AllPaddingRow(usize),
    #[error("reconstruction mask selects no target positions")]
    EmptyMask,
    #[error("probability {0} is outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("zero-norm embedding row {0}")]
    ZeroNormEmbedding(usize),
    #[error("no ranked results to score")]
    EmptyResults,
    #[error("no answer group has at least two questions")]
    NoEligibleGroups,
    #[error("vocabulary hash {found} does not match checkpoint hash {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("answer index is empty")]
    EmptyIndex,
    #[error("projection needs at least 2 rows and 2 dims, got {rows}x{dims}")]
    DegenerateInput { rows: usize, dims: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Error::MalformedJson {
            context: context.into(),
            message: err.to_string(),
        }
    }

    /// Process exit code: 2 for problems with user input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MalformedJson { .. }
            | Error::InvalidFractions(_)
            | Error::EmptySplit(_)
            | Error::EmptyCorpus
            | Error::EmptyText(_)
            | Error::BatchTooSmall(_)
            | Error::TooFewAnswerGroups(_)
            | Error::EmptyResults
            | Error::NoEligibleGroups
            | Error::VocabMismatch { .. }
            | Error::EmptyIndex
            | Error::DegenerateInput { .. }
            | Error::Config(_)
            | Error::Checkpoint { .. } => 2,
            Error::Io { source, .. } => match source.kind() {
                std::io::ErrorKind::NotFound
                | std::io::ErrorKind::PermissionDenied
                | std::io::ErrorKind::InvalidData => 2,
                _ => 1,
            },
            _ => 1,
        }
    }
}
