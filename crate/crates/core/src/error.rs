use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot sample batch: {0}")]
    Sampling(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at step {step}: {term} loss is not finite")]
    Divergence { term: String, step: u64 },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("checkpoint format version {found} cannot be migrated (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user input rather than the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::Dimension(_)
                | Error::Config(_)
                | Error::Sampling(_)
                | Error::Contract(_)
                | Error::Checkpoint { .. }
                | Error::Version { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
