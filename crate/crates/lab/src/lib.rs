//! Files, the answer-oracle client and the `ldar` command line around
//! `ldar_core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod oracle;
pub mod train;

pub use error::{LabError, Result};
