use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed container: {0}")]
    MalformedContainer(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    RateMismatch { expected: u32, actual: u32 },
    #[error("STFT configuration is not invertible: {0}")]
    NonInvertibleConfig(String),
    #[error("unstable filter design: pole magnitude {0}")]
    UnstableDesign(f64),
    #[error("cutoff {cutoff} Hz outside (0, {nyquist}) Hz")]
    CutoffOutOfRange { cutoff: f64, nyquist: f64 },
    #[error("invalid filter order {0} (expected 2..=10)")]
    InvalidOrder(usize),
    #[error("input is silent")]
    SilentInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at step {step}")]
    DivergedTraining { step: usize },
    #[error("diffusion step {step} outside 0..={max}")]
    StepOutOfRange { step: usize, max: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
