use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cholesky factorization failed at pivot {pivot}: value {value:e} is not positive")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("episode sampling failed: {0}")]
    Sampling(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    CheckpointChecksum { stored: u32, computed: u32 },

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from bad user input (config, dataset or
    /// arguments) rather than a failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Dataset(_)
                | Error::InvalidArgument(_)
                | Error::Sampling(_)
                | Error::CheckpointVersion { .. }
                | Error::CheckpointChecksum { .. }
                | Error::CheckpointFormat(_)
                | Error::Io { .. }
        )
    }
}
