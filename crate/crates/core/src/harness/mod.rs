//! Metrics, test imagery and the scripted experiments.

pub mod experiments;
pub mod metrics;
pub mod report;
pub mod scenes;

use thiserror::Error;

use crate::condsa::CondsaError;
use crate::image_io::ImageError;
use crate::lonpe::LonpeError;
use crate::noise_model::NoiseError;

pub use experiments::{
    default_arms, default_sweep_priors, evaluate, prior_label, make_eval_set, run_ablation_lonpe, run_blind_path,
    run_conditional_ablation, run_estimation_sweep, ConditionalAblationConfig, ConditionalOutcome, EvalItem, LonpeArm,
};
pub use metrics::{mape, psnr, Summary};
pub use report::{ExperimentReport, Record};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("reference prior has a zero component")]
    ZeroTruth,
    #[error("no data")]
    DataEmpty,
    #[error(transparent)]
    Lonpe(#[from] LonpeError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Condsa(#[from] CondsaError),
    #[error(transparent)]
    Image(#[from] ImageError),
}
