pub mod acquisition;
pub mod config;
pub mod csvio;
pub mod embedding;
pub mod error;
pub mod exec;
pub mod gflownet;
pub mod grid;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod surrogate;

pub use error::{Error, Result};
