//! Library side of the `bitdiff` command: configuration, toy data, the
//! training loop, sampling, evaluation, and file formats.

pub mod analyze;
pub mod archive;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod sample;
pub mod train;

pub use config::RunConfig;
pub use error::{CliError, Result};
