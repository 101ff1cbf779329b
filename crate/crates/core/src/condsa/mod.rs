//! Prior-conditioned channel self-attention and the micro-Condformer.

pub mod blocks;
pub mod model;
pub mod train;

use thiserror::Error;

use crate::image_io::ImageError;
use crate::noise_model::NoiseError;
use crate::tensor::TensorError;

pub use blocks::{channel_attention, condsa_block, embed_prior, lfm, transformer_block, BlockShape, Embedding};
pub use model::{Condformer, CondformerConfig, LatentKind};
pub use train::{train_denoiser, NoiseMix, PairSource, PriorMode, Sample, SyntheticPairs, TrainConfig};

#[derive(Debug, Error)]
pub enum CondsaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{height}x{width} is not divisible by {factor}")]
    NotDivisible {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no training data")]
    DataEmpty,
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}
