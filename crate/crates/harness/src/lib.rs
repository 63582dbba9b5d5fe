//! Experiment harness: TOML configuration, binary checkpoints, CSV metrics,
//! sample-based evaluation and the `dipp` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod pipeline;

pub use cli::cli_main;
pub use error::{HarnessError, Result};
