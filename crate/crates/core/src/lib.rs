pub mod cli;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evalstats;
pub mod model;
pub mod nn;
pub mod rng;
pub mod speaker;
pub mod synthgen;
pub mod tokenize;

pub use error::{Error, Result};
