use std::path::{Path, PathBuf};

/// Errors surfaced by the command-line layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] lcmem_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}:{column}: {message}", path.display())]
    Json { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error("configuration error: {0}")]
    Config(String),
    /// A gate or consistency check did not hold.
    #[error("validation failed: {0}")]
    Validation(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn json(path: impl AsRef<Path>, e: serde_json::Error) -> Self {
        Error::Json { path: path.as_ref().to_path_buf(), line: e.line(), column: e.column(), message: e.to_string() }
    }

    /// Process exit status: 2 for configuration and input problems, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        use lcmem_core::Error as C;
        match self {
            Error::Config(_) | Error::Json { .. } | Error::Io { .. } => 2,
            Error::Core(C::Config(_)) => 2,
            _ => 1,
        }
    }
}
