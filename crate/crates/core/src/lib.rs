//! Contrastive label-free segmentation from diffusion features.

pub mod decoder;
pub mod cluster;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod saliency;
pub mod synth;
pub mod tensor_io;

pub use error::{Error, Result};
