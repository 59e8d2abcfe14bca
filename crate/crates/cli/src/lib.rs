//! Config-driven front end for `gle-core`: strict TOML experiment files,
//! subcommands writing CSV, and exit codes by failure class.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Command};
pub use config::{parse_config, parse_str, to_toml, ExperimentConfig};
pub use error::CliError;
