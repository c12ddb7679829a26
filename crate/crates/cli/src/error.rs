use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Missing {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
    #[error(transparent)]
    Model(#[from] hades::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing {
                path: path.to_path_buf(),
                source,
            }
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    pub fn exit_code(&self) -> i32 {
        use hades::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } => 3,
            CliError::Io { .. } => 1,
            CliError::Gradcheck(_) => 5,
            CliError::Model(e) => match e {
                E::Config(_) | E::OutOfVocab { .. } => 2,
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
                E::NonFinite(_) | E::Degenerate(_) => 4,
                _ => 1,
            },
        }
    }
}
