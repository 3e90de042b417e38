//! Dataset provenance for diffusion models through imperceptible group watermarks.
//!
//! The crate covers the whole loop: train a watermark generator/decoder pair,
//! mark chosen subgroups of a training corpus, train a small denoising
//! diffusion model on the result, and test generated samples for a
//! watermark/feature correlation.

pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod detection;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod provenance;

pub use error::{Error, Result};
pub use image::{ImageShape, ImageTensor};
