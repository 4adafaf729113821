//! Library surface of the runner: configuration, persistence, pipelines.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
