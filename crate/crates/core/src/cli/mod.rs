//! Run configuration and the `simulate`, `run` and `eval` commands.

mod commands;
mod config;

pub use commands::*;
pub use config::RunConfig;
