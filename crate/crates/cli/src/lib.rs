//! Configuration and commands behind the `archrank` binary.

pub mod commands;
pub mod config;

pub use config::RunConfig;
