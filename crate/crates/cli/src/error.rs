use stereovae::Error;
use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("output directory {0} is locked by another run")]
    Locked(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 for configuration errors, 3 for data and I/O errors, 4 for
    /// numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Locked(_) => 3,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::State(_) => 2,
                Error::Shape(_) | Error::Ingest { .. } | Error::EmptyInput(_) | Error::Io { .. } => 3,
                Error::Numeric(_) | Error::Domain(_) | Error::Geometry(_) => 4,
            },
        }
    }
}
