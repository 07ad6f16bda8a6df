//! Command-line front end of the SSFO laboratory: run configuration,
//! checkpoint and JSONL formats, run manifests, and the pipeline commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod io;
pub mod manifest;

pub use config::Config;
pub use error::{CliError, Result};
