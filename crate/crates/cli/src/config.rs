use std::path::Path;

use noiseprior::condsa::{CondformerConfig, TrainConfig};
use noiseprior::harness::ConditionalAblationConfig;
use noiseprior::lonpe::LonpeConfig;
use noiseprior::noise_model::NoiseKind;
use noiseprior::prior_net::{PriorNetConfig, PriorTrainConfig};
use serde::Deserialize;

use crate::error::CliError;

/// Settings read from `--config`. Every table is optional; flags given on
/// the command line win.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub synth: SynthConfig,
    pub lonpe: LonpeConfig,
    pub model: CondformerConfig,
    pub train: TrainConfig,
    pub prior_net: PriorNetConfig,
    pub prior_train: PriorTrainConfig,
    pub data: DataConfig,
    pub ablation: ConditionalAblationConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: NoiseKind,
    pub clip: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { kind: NoiseKind::PoissonGaussian, clip: false }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub images: usize,
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { images: 24, image_size: 128 }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}
