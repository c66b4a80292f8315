//! Config-driven training, evaluation, gradient checking and checkpointing
//! for indexnet networks.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
mod error;
pub mod model;
pub mod trainer;

pub use error::{CliError, CliResult};
