//! Library half of the `lxfuse` binary: configuration and one function per
//! subcommand, so tests can drive them without spawning processes.

pub mod commands;
pub mod config;
mod error;

pub use commands::{
    cmd_ablate, cmd_annotate, cmd_bench, cmd_degrade, cmd_eval, cmd_gradcheck, cmd_train, AugmentChoice,
};
pub use config::RunConfig;
pub use error::CliError;
