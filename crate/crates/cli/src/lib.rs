//! Experiment driver: configuration, run directories and subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod rundir;

pub use config::ExperimentConfig;
pub use error::{exit, exit_code, to_exit, CliError};
pub use rundir::{create_run_dir, output_root, OUT_ENV};
