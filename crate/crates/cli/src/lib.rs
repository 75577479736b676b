//! Experiment harness for the two-layer channel model: configuration,
//! twin-experiment pipeline, CSV output and the command-line front end.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod studies;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
