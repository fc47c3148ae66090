use std::path::PathBuf;

use crossdsr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("unpaired file {}: no matching {missing}", orphan.display())]
    Orphan { orphan: PathBuf, missing: String },
    #[error("image {name} is {height}x{width}, smaller than patch size {patch}")]
    TooSmall {
        name: String,
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("unsupported scale {0} (supported: 2, 4, 8, 16)")]
    UnsupportedScale(u32),
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Validation failures are reported with exit code 1, runtime aborts with 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::UnsupportedScale(_)
                | Error::InvalidArgument(_)
                | Error::Orphan { .. }
                | Error::TooSmall { .. }
        )
    }
}
