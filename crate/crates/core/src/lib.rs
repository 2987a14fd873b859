//! Deterministic desk-scale simulator of 4D-parallel mini-batch GCN training.

pub mod dense;
pub mod error;
pub mod cli;
pub mod comm;
pub mod graph;
pub mod model;
pub mod pmm;
pub mod rng;
pub mod sampling;
pub mod shardsample;
pub mod scalar;

pub use error::{Error, Result};
