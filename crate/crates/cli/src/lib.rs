//! Command-line front end of `svfreg`.

pub mod commands;
pub mod config;
pub mod error;
pub mod visualize;

pub use commands::{run, Cli};
pub use config::CliConfig;
pub use error::{CliError, Result};
