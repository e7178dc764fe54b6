pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod link;
pub mod memory;
pub mod model;
pub mod nn;
pub mod objective;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
