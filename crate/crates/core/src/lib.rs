//! Noise-prior estimation and prior-conditioned denoising.

pub mod condsa;
pub mod harness;
pub mod image_io;
pub mod lonpe;
pub mod noise_model;
pub mod prior_net;
pub mod tensor;

pub use image_io::{ColorImage, ImagePlane};
pub use lonpe::{LonpeConfig, PriorEstimate};
pub use noise_model::{NoiseKind, NoisePrior, NoiseSpec};
