//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward called on a non-scalar node of shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("unknown token surface {0:?}")]
    UnknownSurface(String),

    #[error("unknown image id {0}")]
    UnknownImage(u32),

    #[error("sequence of {len} positions exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid layer index {index} (model has {n_layers} layers, indices are 1-based)")]
    LayerIndex { index: usize, n_layers: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("overlap undefined: English activated-neuron set is empty{0}")]
    UndefinedOverlap(String),

    #[error("no English trace among the inputs (expected language tag {0:?})")]
    MissingEnglish(String),

    #[error("dimension mismatch across inputs: {0}")]
    DimensionMismatch(String),

    #[error("no layer strictly exceeds the MSD threshold {theta}")]
    EmptySelection { theta: f64 },

    #[error("need at least two languages for MSD, got {0}")]
    TooFewLanguages(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("frozen parameter {0:?} changed during training")]
    FrozenDrift(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag, used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::Config(_) => "config",
            Error::UnknownToken(_) => "unknown_token",
            Error::UnknownSurface(_) => "unknown_surface",
            Error::UnknownImage(_) => "unknown_image",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::LayerIndex { .. } => "layer_index",
            Error::Empty(_) => "empty",
            Error::UndefinedOverlap(_) => "undefined_overlap",
            Error::MissingEnglish(_) => "missing_english",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::EmptySelection { .. } => "empty_selection",
            Error::TooFewLanguages(_) => "too_few_languages",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Truncated { .. } => "truncated",
            Error::FrozenDrift(_) => "frozen_drift",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
