use qgda_core::QgError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] QgError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for anything the user can fix in the inputs, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Io { .. } | Self::Csv(_) => 2,
            Self::Model(e) => match e {
                QgError::InvalidGrid(_)
                | QgError::GridMismatch(_)
                | QgError::InvalidParameter(_)
                | QgError::Dimension { .. }
                | QgError::Format { .. }
                | QgError::TooManyModes { .. }
                | QgError::Io(_) => 2,
                _ => 3,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
