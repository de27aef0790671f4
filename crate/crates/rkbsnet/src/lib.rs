//! Command-line harness for `rkbsnet-core`.
//!
//! Each verb loads an [`ExperimentConfig`], runs one analysis and produces a
//! [`ReportBundle`] carrying results, verdicts, curve tables and a provenance
//! block (configuration hash, seed, tool version) sufficient to reproduce it.
//!
//! Exit statuses: `0` success, `1` analysis-domain failure (including failed
//! verdicts), `2` configuration error.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use commands::{run, Command};
pub use config::ExperimentConfig;
pub use error::CliError;
pub use report::{Format, ReportBundle, Status};
