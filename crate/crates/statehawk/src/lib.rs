//! File formats, training orchestration and evaluation for statehawk.
//!
//! The numerical work lives in `statehawk-core`; this crate reads and writes
//! datasets, configs and checkpoints, runs the training pipeline and scores
//! the results.

mod error;

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod eval;
pub mod logs;
pub mod pipeline;
pub mod repro;

pub use error::{Error, Result};
pub use statehawk_core as core;
