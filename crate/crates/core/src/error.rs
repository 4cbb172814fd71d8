use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("I/O error on {path}: {source}")]
    IoAt { path: PathBuf, source: std::io::Error },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("no trainable text")]
    NoTrainableText,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },

    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error("corpus {src}-{tgt} has no English side")]
    MissingEnglish { src: String, tgt: String },

    #[error("no language detector for {0}")]
    MissingDetector(String),

    #[error("unknown parameter {0}")]
    UnknownParameter(String),

    #[error("an adapter already exists at {0}")]
    DuplicateAdapter(String),

    #[error("vocabulary lacks language code for {0}")]
    MissingLangCode(String),

    #[error("unknown language {0}")]
    UnknownLanguage(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint payload truncated in tensor {tensor}")]
    TruncatedPayload { tensor: String },

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("pack was trained against base {expected}, not {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("trained store does not differ from its base: nothing to extract")]
    EmptyPack,

    #[error("both language packs replace {0}")]
    PackConflict(String),

    #[error("{leg} leg of pivot translation failed: {source}")]
    PivotLeg { leg: &'static str, source: Box<Error> },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::IoAt { path, source }
    }
}
