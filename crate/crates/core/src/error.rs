use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, lengths, indices).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad user-provided data, e.g. a token id outside the vocabulary.
    #[error("input error: {0}")]
    Input(String),

    #[error("metric domain error: {0}")]
    MetricDomain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("search exhausted after {pruned} of {target} sublayers: no candidates left")]
    SearchExhausted { pruned: usize, target: usize },

    #[error("enumeration of {count} masks exceeds the cap of {cap}")]
    EnumerationCap { count: u128, cap: u128 },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{}: line {line}: {message}", path.display())]
    Tokens {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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
}

/// Failures while decoding an LPCK checkpoint container.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"LPCK\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format_version {found} (expected {expected})")]
    VersionMismatch { found: u64, expected: u64 },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("tensor `{name}`: {message}")]
    ShapeMismatch { name: String, message: String },

    #[error(
        "truncated payload: tensor `{name}` needs bytes {start}..{end} but payload has {available}"
    )]
    Truncated {
        name: String,
        start: u64,
        end: u64,
        available: u64,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),

    #[error("tensor `{name}`: offset {offset} overlaps or precedes the previous tensor")]
    Overlap { name: String, offset: u64 },

    #[error("tensor `{0}`: unsupported dtype")]
    Dtype(String),
}
