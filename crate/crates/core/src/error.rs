use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward root must be a scalar, got shape {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("backward root does not belong to this graph")]
    DetachedRoot,

    #[error("loss evaluated twice at identical parameters differs ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid landmark count {landmarks} for sequence length {len}")]
    InvalidLandmarkCount { landmarks: usize, len: usize },

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("text tokens do not match fusion mode: {0}")]
    ModeTextMismatch(&'static str),

    #[error("caption target is empty")]
    EmptyTarget,

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { id: u32, vocab: usize },

    #[error("text of length {len} exceeds max_text_len {max}")]
    TextTooLong { len: usize, max: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),

    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("loss diverged at epoch {epoch} step {step}, bag {bag_id}: {detail}")]
    DivergedLoss {
        epoch: usize,
        step: usize,
        bag_id: String,
        detail: String,
    },

    #[error("BLEU needs at least one reference")]
    EmptyReference,

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("wrong type for config key `{key}`: {detail}")]
    TypeError { key: String, detail: String },

    #[error("config key `{key}` out of range: {detail}")]
    RangeError { key: String, detail: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
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

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::UnknownKey(_)
                | Error::TypeError { .. }
                | Error::RangeError { .. }
                | Error::InvalidSpec(_)
                | Error::InvalidFractions(_)
        )
    }
}
