//! Command-line harness around `efqat-core`: strict TOML configuration,
//! IDX/CSV/synthetic dataset ingestion, hashed binary checkpoints,
//! line-delimited metrics and plot tables.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use error::{CliError, Result};
