//! Batch driver for the reserve uncertainty-set pipeline.

pub mod config;
pub mod manifest;
pub mod pipeline;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] reserve_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(reserve_core::Error::Config { .. }) => 2,
            _ => 1,
        }
    }
}
