//! Command-line pipelines around the `cpcontrol` library: dataset files,
//! run configuration, end-to-end runs of both synthesis routes and the
//! scenario baseline, result manifests and comparison reports.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod output;
pub mod pipeline;
pub mod report;

pub use commands::{execute, Cli};
pub use error::{CliError, CliResult, Stage};
