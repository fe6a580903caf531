pub mod cli;
pub mod embedstore;
pub mod episodic;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod protocore;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
