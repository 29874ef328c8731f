pub mod calibration;
pub mod cli;
pub mod dataset;
pub mod decoding;
pub mod error;
pub mod exec;
pub mod model;
pub mod predictor;
pub mod probing;

pub use error::{Error, Result};
pub use exec::Execution;
