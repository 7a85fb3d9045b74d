//! Config parsing, run/sweep drivers and output management for the
//! `fedsim` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use config::{emit, parse_config, parse_config_str, Config};
pub use error::CliError;
pub use manifest::RunManifest;
