use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 3,
        }
    }

    pub fn stage(stage: &str, err: impl std::fmt::Display) -> Self {
        CliError::Stage { stage: stage.to_string(), message: err.to_string() }
    }

    /// Classifies a library error raised while running `stage`: invalid
    /// configuration stays a configuration error.
    pub fn from_seg(stage: &str, err: longct_seg::Error) -> Self {
        match err {
            longct_seg::Error::Config(m) => CliError::Config(m),
            longct_seg::Error::Core(longct_core::Error::Config(m)) => CliError::Config(m),
            other => CliError::stage(stage, other),
        }
    }

    pub fn from_core(stage: &str, err: longct_core::Error) -> Self {
        match err {
            longct_core::Error::Config(m) => CliError::Config(m),
            other => CliError::stage(stage, other),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
