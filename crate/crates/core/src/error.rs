use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid label {label} (expected < {classes})")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid noise spec: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid composition: denoiser emits {denoiser:?} but application expects {application:?}")]
    InvalidComposition {
        denoiser: Vec<usize>,
        application: Vec<usize>,
    },

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("format error in {path:?} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing checkpoint: {0:?}")]
    MissingCheckpoint(PathBuf),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable class name, used by the CLI's one-line error output.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidShape(_) => "invalid-shape",
            Error::InvalidLabel { .. } => "invalid-label",
            Error::InvalidSpec(_) => "invalid-spec",
            Error::InvalidInput(_) => "invalid-input",
            Error::InvalidComposition { .. } => "invalid-composition",
            Error::TrainingDiverged { .. } => "training-diverged",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::MissingCheckpoint(_) => "missing-checkpoint",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }
}
