//! Command-line tools and the HTTP inference service built on
//! `formgen_core`.

pub mod api;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod service;

pub use config::RunConfig;
pub use error::CliError;
