//! Command-line runner: configuration, data loading, checkpoints and reports.

pub mod app;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod lock;
pub mod report;

pub use error::{CliError, Result};
