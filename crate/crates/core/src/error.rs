use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no symbols")]
    NoSymbols,
    #[error("out-of-vocabulary symbol {0:?}")]
    OutOfVocabulary(String),
    #[error("invalid segment: {0}")]
    InvalidSegment(String),
    #[error("need at least 2 speakers, got {0}")]
    TooFewSpeakers(usize),
    #[error("waveform shorter than one window ({samples} < {window} samples)")]
    WaveformTooShort { samples: usize, window: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("too few frames: {0} (need at least 4)")]
    TooFewFrames(usize),
    #[error("language id {id} out of range (n_languages = {n})")]
    LanguageOutOfRange { id: usize, n: usize },
    #[error("layer selection k={k} exceeds n_layers={n_layers}")]
    SelectionOutOfRange { k: usize, n_layers: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("instance too large for enumeration: {0} labelings")]
    InstanceTooLarge(f64),
    #[error("no prediction targets")]
    NoPredictionTargets,
    #[error("learning-rate step must be >= 1")]
    StepZero,
    #[error("checkpoint shape mismatch: {}", .0.join(", "))]
    ShapeMismatch(Vec<String>),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
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

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
