use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("tag set is empty after preprocessing")]
    EmptyTagSet,

    #[error("out-of-vocabulary tag `{0}`")]
    OutOfVocabulary(String),

    #[error("corrupt file {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("unsupported file format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: u64, detail: String },

    #[error("clip `{id}`: {source}")]
    Clip { id: String, source: Box<Error> },

    #[error("wav decoding failed: {0}")]
    Wav(hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn clip(id: &str, source: Error) -> Self {
        Error::Clip { id: id.to_owned(), source: Box::new(source) }
    }

    /// Stable snake_case category; a clip error reports its cause.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidInput(_) => "invalid_input",
            Error::EmptyTagSet => "empty_tag_set",
            Error::OutOfVocabulary(_) => "out_of_vocabulary",
            Error::Corrupt { .. } => "corrupt",
            Error::Version { .. } => "version",
            Error::ConfigMismatch(_) => "config_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Clip { source, .. } => source.kind(),
            Error::Wav(_) => "wav",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Id of the clip the error concerns, if any.
    pub fn clip_id(&self) -> Option<&str> {
        match self {
            Error::Clip { id, .. } => Some(id),
            _ => None,
        }
    }
}

impl From<hound::Error> for Error {
    fn from(e: hound::Error) -> Self {
        match e {
            hound::Error::IoError(io) => Error::Io(io),
            other => Error::Wav(other),
        }
    }
}
