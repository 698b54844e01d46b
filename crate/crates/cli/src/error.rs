use std::process::ExitCode;

/// Errors raised by the command layer itself.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("score files disagree on the test set: {0}")]
    MismatchedTestSets(String),
}

/// Stable process exit codes.
pub mod exit {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const TRAINING_ABORTED: u8 = 3;
    pub const CHECKPOINT_VERSION: u8 = 4;
    pub const MISMATCHED_TEST_SETS: u8 = 5;
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => exit::CONFIG,
                CliError::MismatchedTestSets(_) => exit::MISMATCHED_TEST_SETS,
            };
        }
        if let Some(e) = cause.downcast_ref::<bvad_core::Error>() {
            return match e {
                bvad_core::Error::Config(_) => exit::CONFIG,
                bvad_core::Error::Diverged { .. } => exit::TRAINING_ABORTED,
                bvad_core::Error::CheckpointVersion { .. } => exit::CHECKPOINT_VERSION,
                _ => exit::OTHER,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return exit::CONFIG;
        }
    }
    exit::OTHER
}

pub fn to_exit(err: &anyhow::Error) -> ExitCode {
    ExitCode::from(exit_code(err))
}
