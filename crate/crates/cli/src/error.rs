use std::io;
use std::path::{Path, PathBuf};

use bsce_core::Error;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// A library error tied to the file it came from.
    #[error("{}: {source}", path.display())]
    At {
        path: PathBuf,
        #[source]
        source: Error,
    },

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn at(path: &Path) -> impl FnOnce(Error) -> Self + '_ {
        move |source| CliError::At {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 config, 2 I/O, 3 numeric.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io { .. } => 2,
            CliError::At { source, .. } | CliError::Core(source) => match source.root() {
                Error::Io(_) | Error::Corrupt(_) | Error::Version(_) => 2,
                Error::Diverged { .. } | Error::InfiniteLoss { .. } => 3,
                _ => 1,
            },
        }
    }
}
