use std::path::PathBuf;

use thiserror::Error;

use crate::segmark::MarkupError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("zero valid records")]
    EmptyCorpus,

    #[error("duplicate record_id {0:?}")]
    DuplicateRecord(String),

    #[error("no triage verdict for record {0:?}")]
    MissingVerdict(String),

    #[error(transparent)]
    Markup(#[from] MarkupError),

    #[error("invalid segmentation for {record_id:?}: {reason}")]
    InvalidSegmentation { record_id: String, reason: String },

    #[error("texts differ for record {0:?}")]
    TextMismatch(String),

    #[error("annotator outputs do not cover the same records: {0}")]
    CoverageMismatch(String),

    #[error("replay endpoint {endpoint:?} has no entry for {missing} record(s), first {first:?}")]
    IncompleteReplay {
        endpoint: String,
        missing: usize,
        first: String,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("no vector for id {0:?}")]
    MissingVector(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("{path}:{row}: {message}")]
    Malformed { path: PathBuf, row: usize, message: String },

    #[error("grid mismatch: {0}")]
    GridMismatch(&'static str),

    #[error("no segmentation for record {0:?}")]
    MissingSegmentation(String),

    #[error("no projected point for {0:?}")]
    MissingPoint(String),

    #[error("unknown user {0:?}")]
    UnknownUser(String),

    #[error("remote call failed: {0}")]
    Remote(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, row: usize, message: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            row,
            message: message.into(),
        }
    }

    /// Short machine-readable code, stable across releases.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::EmptyCorpus => "empty_corpus",
            Error::DuplicateRecord(_) => "duplicate_record",
            Error::MissingVerdict(_) => "missing_verdict",
            Error::Markup(_) => "markup",
            Error::InvalidSegmentation { .. } => "invalid_segmentation",
            Error::TextMismatch(_) => "text_mismatch",
            Error::CoverageMismatch(_) => "coverage_mismatch",
            Error::IncompleteReplay { .. } => "incomplete_replay",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::EmptyInput(_) => "empty_input",
            Error::MissingVector(_) => "missing_vector",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ZeroNorm => "zero_norm",
            Error::NonFinite(_) => "non_finite",
            Error::Degenerate(_) => "degenerate",
            Error::Malformed { .. } => "malformed",
            Error::GridMismatch(_) => "grid_mismatch",
            Error::MissingSegmentation(_) => "missing_segmentation",
            Error::MissingPoint(_) => "missing_point",
            Error::UnknownUser(_) => "unknown_user",
            Error::Remote(_) => "remote",
            Error::Json(_) => "json",
        }
    }

    /// Location hint (file path, row or character offset) when one is known.
    pub fn location(&self) -> Option<String> {
        match self {
            Error::Io { path, .. } => Some(path.display().to_string()),
            Error::Malformed { path, row, .. } => Some(format!("{}:{}", path.display(), row)),
            Error::Markup(e) => Some(format!("offset {}", e.position())),
            _ => None,
        }
    }
}
