//! Std companion to `planforge-core`: checkpoint container, JSON artifact
//! formats, run configuration, the artifact manifest and the subcommands
//! behind the `planforge` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod io;
pub mod manifest;

pub use commands::Workspace;
pub use config::RunConfig;
pub use error::{CliError, CliResult, Stage};
