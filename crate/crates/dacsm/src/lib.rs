//! Run configuration, file formats and subcommands around `dacsm-core`.

pub mod commands;
pub mod config;
pub mod formats;

pub use commands::{cmd_eval, cmd_train, cmd_verify, RunArgs};
pub use config::RunConfig;
