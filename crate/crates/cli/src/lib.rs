//! Command-line harness for typicality-sampling SGD: dataset generation,
//! embedding and partitioning, paired training comparisons, and the
//! verification suite.
//!
//! Each `cmd_*` function takes a [`RunConfig`] and writes its outputs into
//! `run.out`; the `typsgd` binary is a thin wrapper around them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
mod error;
pub mod output;
pub mod plot;

pub use commands::{cmd_embed, cmd_gen, cmd_partition, cmd_report, cmd_train, cmd_verify};
pub use config::RunConfig;
pub use error::{CliError, CliResult, EXIT_ASSERTION, EXIT_IO, EXIT_OK, EXIT_USAGE};
