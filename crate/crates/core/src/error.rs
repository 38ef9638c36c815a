use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across feature extraction, training and scoring.
#[derive(Debug, Error)]
pub enum Error {
    #[error("waveform too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("zero-RMS {0}")]
    ZeroRms(&'static str),

    #[error("batch needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("no embedding for utterance `{0}`")]
    MissingEmbedding(String),

    #[error("trial set must contain at least one target and one nontarget trial")]
    DegenerateTrials,

    #[error("unsupported audio in {path}: {reason}")]
    UnsupportedAudio { path: PathBuf, reason: String },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("tape does not match the current parameters")]
    StaleTape,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
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

pub type Result<T> = std::result::Result<T, Error>;
