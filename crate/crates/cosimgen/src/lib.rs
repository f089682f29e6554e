//! File formats, checkpoints and commands around [`cosimgen_core`].

pub mod archive;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod ndjson;
pub mod palette_file;
pub mod png;

pub use error::{CliError, Result};
