pub mod checksum;
pub mod datacube;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod models;
pub mod nncore;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
