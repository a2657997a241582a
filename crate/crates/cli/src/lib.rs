//! Command implementations behind the `cascadev` binary.

pub mod commands;
pub mod config;
pub mod format;

use cascadev_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for bad or missing data, 4 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(e) => match e {
                Error::InvalidConfig(_)
                | Error::InvalidSchedule(_)
                | Error::StageOutOfRange { .. } => 2,
                Error::Diverged { .. } | Error::PredictorOutput(_) | Error::InvalidDeltas(..) => 4,
                _ => 3,
            },
        }
    }
}
