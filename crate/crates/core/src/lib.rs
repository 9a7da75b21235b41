pub mod bayesopt;
pub mod checkpoint;
pub mod config;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod objectives;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
