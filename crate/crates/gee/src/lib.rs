//! File formats, scenario files, the parallel replication harness and the
//! `gee` command-line tool built on `gee-core`.

pub mod cli;
pub mod error;
pub mod harness;
pub mod io;
pub mod run;

pub use error::{CliError, Result};
