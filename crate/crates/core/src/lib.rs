//! Fairness-regularized matrix completion.

pub mod aetrain;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod fairmetrics;
pub mod gradcheck;
pub mod harness;
pub mod kdereg;
pub mod mftrain;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod synthgen;
pub mod types;

pub use error::{Error, Result};
