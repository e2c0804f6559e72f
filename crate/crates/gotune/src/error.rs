use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{context}: {source}")]
    Core { context: String, source: gotune_core::Error },
    #[error("{0}")]
    Data(String),
}

impl Error {
    /// 1 usage, 2 data or validation, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Read { .. } | Error::Format { .. } | Error::Core { .. } | Error::Data(_) => 2,
            Error::Write { .. } => 3,
        }
    }

    pub fn read(path: &Path, source: std::io::Error) -> Self {
        Error::Read { path: path.to_path_buf(), source }
    }

    pub fn write(path: &Path, source: std::io::Error) -> Self {
        Error::Write { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), message: message.into() }
    }
}

pub trait Context<T> {
    fn context(self, context: impl std::fmt::Display) -> Result<T>;
}

impl<T> Context<T> for std::result::Result<T, gotune_core::Error> {
    fn context(self, context: impl std::fmt::Display) -> Result<T> {
        self.map_err(|source| Error::Core { context: context.to_string(), source })
    }
}
