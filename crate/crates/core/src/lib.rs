pub mod classifier;
pub mod codec;
pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod refine;
pub mod spectrum;
pub mod vae;
pub mod zoo;

pub use error::{Error, Result};
