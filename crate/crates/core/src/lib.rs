pub mod cli;
pub mod config;
pub mod datasets;
pub mod digits;
pub mod error;
pub mod generation;
pub mod inference;
pub mod latents;
pub mod manipulation;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod plot;
pub mod spatial;
pub mod trainer;

pub use error::{Error, Result};
