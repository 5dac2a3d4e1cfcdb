//! Sparse model compression under a hard density budget, selecting sparse
//! topologies that balance task accuracy against membership-inference risk.

pub mod attack;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod numcore;
pub mod orchestrator;
pub mod rng;
pub mod sparse;

pub use error::{Error, Result};
