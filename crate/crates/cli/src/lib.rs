//! Command-line front end and HTTP service for `fieldseg`.

pub mod args;
pub mod commands;
pub mod error;
pub mod micro;
pub mod preview;
pub mod service;

pub use args::Cli;
pub use error::{CliError, CliResult};

pub fn run(cli: Cli) -> CliResult<()> {
    commands::dispatch(cli.command)
}
