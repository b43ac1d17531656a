pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod grad;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod sampling;
pub mod schedule;
pub mod timesteps;

pub use error::{Error, Result};
