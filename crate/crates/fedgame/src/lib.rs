//! Command-line harness around `fedgame-core`: configuration, file formats,
//! experiment plans and run manifests.

pub mod cli;
pub mod config;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod formats;
pub mod manifest;
