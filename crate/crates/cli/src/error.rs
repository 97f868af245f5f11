use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad, missing or inconsistent configuration or arguments.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A check the command exists to perform did not hold.
    #[error("check failed: {0}")]
    Check(String),
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Core(#[from] oral3d_core::Error),
    #[error(transparent)]
    Nn(#[from] oral3d_nn::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// 2 for failed checks, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Check(_) => 2,
            Error::File { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Attaches the file a failure came from.
pub(crate) trait Context<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T, E: Into<Error>> Context<T> for std::result::Result<T, E> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| Error::File { path: path.to_path_buf(), source: Box::new(e.into()) })
    }
}
