//! Numerics, gradient compression, collectives, parallel-training strategies,
//! a discrete-event cluster simulator and a recommender trainer.

pub mod collectives;
pub mod compression;
pub mod error;
pub mod numerics;
pub mod simulator;
pub mod strategies;
pub mod trainer;

pub use error::{Error, Result};
