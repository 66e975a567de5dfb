//! Command-line front end: JSON configs in, JSON reports and CSV tables out.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{run, Verb};
pub use config::{RunConfig, Scale};
pub use error::CliError;
