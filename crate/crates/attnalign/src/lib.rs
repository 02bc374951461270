//! File formats, parallel execution and the command-line front end for
//! `attnalign-core`.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod corpus_io;
pub mod error;
pub mod exec;
pub mod lock;
pub mod metrics;
pub mod run_config;
pub mod svg;

pub use error::{CliError, ErrorKind, Result};

/// Version string recorded in every output directory.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
