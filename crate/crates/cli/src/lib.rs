//! Library behind the `atwwm` binary: argument parsing, run configuration and
//! the experiment pipeline each subcommand drives.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

pub use cli::{Cli, Command, Common};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
