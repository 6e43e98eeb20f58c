//! File formats, sweeps, reports and the command-line front end around
//! `clip-lab-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod shard;
pub mod store;
pub mod sweep;
pub mod tasks;

pub use error::{LabError, Result};
