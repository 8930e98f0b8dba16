use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the toolkit. Variants are grouped loosely by the stage
/// of the pipeline that produces them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unsupported meter: {0}")]
    UnsupportedMeter(String),

    #[error("time {time:.6}s outside grid span [{start:.6}, {end:.6}]")]
    OutsideGrid { time: f64, start: f64, end: f64 },

    #[error("note {index} (pitch {pitch}, onset {onset:.6}s) falls outside the beat grid")]
    NoteOutsideGrid { index: usize, pitch: u8, onset: f64 },

    #[error("unknown chord label {0:?}")]
    UnknownChord(String),

    #[error("malformed token sequence at offset {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    #[error("wav: {0}")]
    Wav(String),

    #[error("midi: {0}")]
    Midi(String),

    #[error("no warping path exists between {rows} and {cols} frames under the step set")]
    InfeasiblePath { rows: usize, cols: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bar {bar} has {len} positions, exceeding segment length {max}")]
    OversizedBar { bar: usize, len: usize, max: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Invalid(_) => "invalid",
            Error::UnsupportedMeter(_) => "unsupported-meter",
            Error::OutsideGrid { .. } => "outside-grid",
            Error::NoteOutsideGrid { .. } => "note-outside-grid",
            Error::UnknownChord(_) => "unknown-chord",
            Error::Decode { .. } => "decode",
            Error::Wav(_) => "wav",
            Error::Midi(_) => "midi",
            Error::InfeasiblePath { .. } => "infeasible-path",
            Error::Shape(_) => "shape",
            Error::OversizedBar { .. } => "oversized-bar",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
