use std::io;
use std::path::{Path, PathBuf};

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{file}:{line}: {msg}")]
    ConfigLine { file: String, line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("missing {what} at {}; run `flowcem {command}` first", path.display())]
    MissingPrerequisite { what: &'static str, path: PathBuf, command: &'static str },
    #[error("{} of {total} cells diverged: {}", cells.len(), cells.join(", "))]
    Diverged { cells: Vec<String>, total: usize },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}:{line}: {msg}", path.display())]
    Malformed { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Core(#[from] flowcem::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        CliError::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub(crate) fn config(e: flowcem::Error) -> Self {
        CliError::Config(e.to_string())
    }

    /// 0 success, 1 config or I/O error, 2 missing prerequisite, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingPrerequisite { .. } => 2,
            CliError::Diverged { .. } | CliError::Core(flowcem::Error::Diverged(_)) => 3,
            _ => 1,
        }
    }
}
