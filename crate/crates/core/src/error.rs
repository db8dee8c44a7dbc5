use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid region layout: {0}")]
    InvalidLayout(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: malformed record{}: {message}", field.as_ref().map(|f| format!(" (field `{f}`)")).unwrap_or_default())]
    Parse {
        line: usize,
        field: Option<String>,
        message: String,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("missing field `{0}`")]
    MissingField(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("zero-norm row in {0}")]
    ZeroNorm(String),

    #[error("token id {id} outside vocabulary of size {size}")]
    OutOfVocabulary { id: u32, size: usize },

    #[error("cannot build any valid triplet: {0}")]
    NoTriplets(String),

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error(transparent)]
    Backend(#[from] crate::explain::BackendError),

    #[error("unparseable consistency score in response: {raw:?}")]
    UnparseableScore { raw: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
