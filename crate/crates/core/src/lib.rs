pub mod cli;
pub mod config;
pub mod dataio;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
