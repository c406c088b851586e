pub mod audio;
pub mod checkpoint;
pub mod cli;
pub mod context;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod model;
pub mod pairing;
pub mod params;
pub mod quantizer;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
