use std::path::{Path, PathBuf};

use crate::checkpoint::CheckpointError;
use crate::pgm::PgmError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Pgm {
        path: PathBuf,
        #[source]
        source: PgmError,
    },
    #[error("{}: {source}", path.display())]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] vseg_core::Error),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn pgm(path: &Path, source: PgmError) -> Self {
        Error::Pgm {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Core(vseg_core::Error::Diverged { .. } | vseg_core::Error::NonFiniteGradient { .. }) => 3,
            _ => 2,
        }
    }
}
