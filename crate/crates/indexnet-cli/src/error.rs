use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Library(#[from] indexnet::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Config 2, data and checkpoint files 3, numeric failures 4, failed gradient check 5.
    pub fn exit_code(&self) -> u8 {
        use indexnet::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Checkpoint(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::GradCheck(_) => 5,
            CliError::Library(E::Config(_) | E::Unsupported(_) | E::Geometry(_)) => 2,
            CliError::Library(E::Format { .. }) => 3,
            CliError::Library(E::Numeric(_)) => 4,
            CliError::Library(_) | CliError::Io(_) => 1,
        }
    }

    /// Files the library error under config problems.
    pub fn config(e: indexnet::Error) -> Self {
        match e {
            indexnet::Error::Numeric(_) => CliError::Library(e),
            other => CliError::Config(other.to_string()),
        }
    }

    /// Files the library error under data problems.
    pub fn data(e: indexnet::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
