pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod runner;
pub mod split;
pub mod strategies;
pub mod synth;

pub use error::{Error, Result};
