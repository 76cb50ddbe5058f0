//! File formats, dataset IO and the command line around `fsl-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod report;
pub mod run;

pub use error::{HarnessError, Result};
