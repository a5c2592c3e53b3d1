//! Files, datasets and the command-line pipeline around `vctrl-core`.

pub mod archive;
pub mod commands;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;

pub use commands::{run, Command};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
