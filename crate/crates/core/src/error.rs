use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token {token} at codebook {codebook}, frame {frame} is outside [0, {size})")]
    TokenOutOfRange {
        codebook: usize,
        frame: usize,
        token: u32,
        size: usize,
    },
    #[error("ragged token grid: codebook {codebook} has {len} frames, expected {expected}")]
    RaggedGrid {
        codebook: usize,
        len: usize,
        expected: usize,
    },
    #[error("codec spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sample rate mismatch: waveform at {wave} Hz, codec expects {codec} Hz")]
    SampleRateMismatch { wave: u32, codec: u32 },
    #[error("waveform contains non-finite samples")]
    NonFiniteSamples,
    #[error("empty input: {0}")]
    Empty(String),
    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),
    #[error("malformed document: {0}")]
    Malformed(String),
    #[error("not enough distinct points: {points} distinct, {clusters} clusters requested")]
    TooFewPoints { points: usize, clusters: usize },
    #[error("state space of {states} joint states exceeds the exact-inference limit of {limit}")]
    StateSpaceTooLarge { states: usize, limit: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("utterance `{id}` lasts {duration_s} s, above the batch budget of {budget_s} s")]
    UtteranceTooLong {
        id: String,
        duration_s: f64,
        budget_s: f64,
    },
    #[error("decode mode {mode} is incompatible with this checkpoint: {reason}")]
    ModeMismatch { mode: String, reason: String },
    #[error("external backend not configured: {0}")]
    NotConfigured(String),
    #[error("chart rendering failed: {0}")]
    Render(String),
    #[error("invalid config: {0}")]
    Config(String),
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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::Diverged { .. } | Error::NonFinite(_) | Error::Render(_)
        )
    }
}
