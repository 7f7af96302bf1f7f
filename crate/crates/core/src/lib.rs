pub mod camera;
pub mod dataset;
pub mod error;
pub mod imagery;
pub mod metrics;
pub mod nerf;
pub mod par;
pub mod pipeline;

pub use error::{Error, Result};
pub mod nn;
pub mod noise;
pub mod embedder;
pub mod extractor;
pub mod synth;
