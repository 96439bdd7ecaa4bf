use std::io;

use crate::fingerprint::TensorDigest;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed safetensors input. `tensor` names the offending entry when known.
    #[error("format error{}: {msg}", tensor.as_ref().map(|t| format!(" in tensor {t:?}")).unwrap_or_default())]
    Format { tensor: Option<String>, msg: String },

    #[error("unsupported dtype {0:?}")]
    UnsupportedDType(String),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("tensor {name:?}: byte length {actual} does not match dtype/shape ({expected})")]
    LengthMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },

    #[error("codec error: {0}")]
    Codec(String),

    #[error("codec id mismatch: blob is {found}, decoder expects {expected}")]
    CodecMismatch { expected: String, found: String },

    #[error("base digest mismatch: blob expects {expected}, got {actual}")]
    BaseMismatch {
        expected: TensorDigest,
        actual: TensorDigest,
    },

    #[error("sketch parameter mismatch: {0}")]
    SketchMismatch(String),

    #[error("predictor input out of range: {0}")]
    OutOfRange(f64),

    #[error("rank-deficient design matrix; training pairs do not span the feature space")]
    RankDeficient,

    #[error("instance too large for exhaustive enumeration: {0} tensors (max {1})")]
    TooLarge(usize, usize),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("integrity failure: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("metadata store: {0}")]
    Meta(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(tensor: Option<&str>, msg: impl Into<String>) -> Self {
        Error::Format {
            tensor: tensor.map(str::to_owned),
            msg: msg.into(),
        }
    }
}

macro_rules! meta_from {
    ($($t:ty),*) => {
        $(impl From<$t> for Error {
            fn from(e: $t) -> Self {
                Error::Meta(e.to_string())
            }
        })*
    };
}

meta_from!(
    redb::Error,
    redb::DatabaseError,
    redb::TransactionError,
    redb::TableError,
    redb::StorageError,
    redb::CommitError
);
