use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything that can go wrong in the engine.
///
/// The variants fall into two classes which callers (the CLI in particular)
/// need to tell apart: I/O failures and validation failures. See
/// [`Error::is_io`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"KNNF\", found {found:02x?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("trailing data: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: u64, actual: u64 },

    #[error("empty shape: T={frames}, D={dim}")]
    EmptyShape { frames: usize, dim: usize },

    #[error("non-finite value at frame {frame}, dim {dim}")]
    NonFinite { frame: usize, dim: usize },

    #[error("invalid frame rate {0}")]
    InvalidFrameRate(f32),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("frame rate mismatch: expected {expected} Hz, found {found} Hz")]
    FrameRateMismatch { expected: f32, found: f32 },

    #[error("zero-norm frame {frame} in {source_id}")]
    ZeroNormFrame { source_id: String, frame: usize },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid duration {0} s")]
    InvalidDuration(f64),

    #[error("requested {requested} s but only {available} s available")]
    DurationExceeded { requested: f64, available: f64 },

    #[error("k = {k} out of range for database of {n} units")]
    InvalidK { k: usize, n: usize },

    #[error("lambda {0} outside [0, 1]")]
    InvalidLambda(f64),

    #[error("invalid block size {0}")]
    InvalidBlockSize(usize),

    #[error("group {label:?} has {found} embeddings, policy needs at least {needed}")]
    GroupTooSmall {
        label: String,
        found: usize,
        needed: usize,
    },

    #[error("unknown speaker {0}")]
    UnknownSpeaker(usize),

    #[error("unknown utterance_id {0:?} in external scores")]
    UnknownUtterance(String),

    #[error("separation unattainable: {0}")]
    SeparationUnattainable(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed {what} in {path}: {message}")]
    Malformed {
        what: &'static str,
        path: PathBuf,
        message: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }

    /// Stable snake_case identifier for machine-readable error reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Truncated { .. } => "truncated",
            Error::TrailingBytes { .. } => "trailing_bytes",
            Error::EmptyShape { .. } => "empty_shape",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidFrameRate(_) => "invalid_frame_rate",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::FrameRateMismatch { .. } => "frame_rate_mismatch",
            Error::ZeroNormFrame { .. } | Error::ZeroNorm => "zero_norm",
            Error::Empty(_) => "empty",
            Error::InvalidDuration(_) => "invalid_duration",
            Error::DurationExceeded { .. } => "duration_exceeded",
            Error::InvalidK { .. } => "invalid_k",
            Error::InvalidLambda(_) => "invalid_lambda",
            Error::InvalidBlockSize(_) => "invalid_block_size",
            Error::GroupTooSmall { .. } => "group_too_small",
            Error::UnknownSpeaker(_) => "unknown_speaker",
            Error::UnknownUtterance(_) => "unknown_utterance",
            Error::SeparationUnattainable(_) => "separation_unattainable",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Malformed { .. } => "malformed",
        }
    }
}
