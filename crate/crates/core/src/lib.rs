//! Core of statehawk: a regime-switching simulator, a small reverse-mode
//! differentiation engine, the two-stage reinforcement-learning hidden-state
//! estimator with its multi-head emission predictors, and a Gaussian HMM
//! baseline.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, threads and
//! the command line live in the `statehawk` crate.

#![no_std]

extern crate alloc;

mod error;

pub mod dataset;
pub mod emission;
pub mod hmm;
pub mod nd;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod stage1;
pub mod stage2;

pub use error::{Error, Result};
