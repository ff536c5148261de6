pub mod attention;
pub mod codec;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod image;
pub mod network;
pub mod prob;
pub mod range_coder;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
