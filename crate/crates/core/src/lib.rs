pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod genotype;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod search;
pub mod space;
pub mod sparse;
pub mod tensor;

pub use error::{DassError, Result};
