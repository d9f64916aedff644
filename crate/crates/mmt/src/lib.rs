//! File formats, checkpoints, configuration, experiment runner and command
//! implementations around [`mmt_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod formats;
pub mod grid;
pub mod manifest;
pub mod metrics;
pub mod pipeline;

pub use error::{Error, Result};
pub use mmt_core;
