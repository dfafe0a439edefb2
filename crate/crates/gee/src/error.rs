use std::path::PathBuf;

/// Failures of a command, each mapped to a stable exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Parse { .. } | CliError::Read { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Write { .. } => 1,
        }
    }
}

impl From<gee_core::Error> for CliError {
    fn from(e: gee_core::Error) -> Self {
        use gee_core::Error as E;
        match e {
            E::Config { field, reason } => CliError::Config { field, reason },
            E::InvalidArgument(reason) => CliError::config("arguments", reason),
            E::UnsupportedMethod(m) => CliError::config("method", m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
