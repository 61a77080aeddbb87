//! Config-driven runner for meta-training, bitwidth search and retraining,
//! with the checkpoint and report formats those stages exchange.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use error::{CliError, Result};
