//! File formats, threading and the command line around `lcmem-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod parallel;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
pub use lcmem_core as core;
