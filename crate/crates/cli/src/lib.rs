//! Library side of the `lobforge` binary: stage functions, run manifests
//! and the pipeline driver.

pub mod cli;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod stages;

pub use error::{CliError, Result};
