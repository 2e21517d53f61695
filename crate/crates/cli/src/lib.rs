//! Command-line driver: configuration, subcommands and run artifacts.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::Run;
pub use config::RunConfig;
pub use error::CliError;
