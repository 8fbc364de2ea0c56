use std::path::Path;

use smoothwarp::Error;

/// Failure of a command, carrying the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    pub fn parse(path: &Path, line: Option<u64>, msg: impl std::fmt::Display) -> Self {
        match line {
            Some(l) => CliError::Data(format!("{}:{l}: {msg}", path.display())),
            None => CliError::Data(format!("{}: {msg}", path.display())),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Domain(_) => CliError::Config(e.to_string()),
            Error::Usage(_) | Error::Data(_) => CliError::Data(e.to_string()),
            Error::Numerical(_) | Error::Diverged { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
