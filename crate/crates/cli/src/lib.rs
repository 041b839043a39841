//! Experiment plumbing around `spformer-core`: TOML configs, checkpoints,
//! CSV logs and the `spformer` command set.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod logs;
pub mod oracle;

pub use error::{CliError, CliResult};
