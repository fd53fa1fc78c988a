#![no_std]
extern crate alloc;

pub mod atlas;
pub mod audit;
pub mod augment;
pub mod detector;
pub mod error;
pub mod format;
mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod training;
pub mod world;

pub use error::{Error, Result};
