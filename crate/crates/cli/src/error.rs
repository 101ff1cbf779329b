use noiseprior::condsa::CondsaError;
use noiseprior::harness::HarnessError;
use noiseprior::image_io::ImageError;
use noiseprior::lonpe::LonpeError;
use noiseprior::noise_model::NoiseError;
use noiseprior::prior_net::PriorNetError;
use noiseprior::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NoiseError> for CliError {
    fn from(e: NoiseError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<LonpeError> for CliError {
    fn from(e: LonpeError) -> Self {
        match e {
            LonpeError::RankDeficient { .. } | LonpeError::TooFewPatches { .. } => CliError::Numeric(e.to_string()),
            LonpeError::EmptyPatch | LonpeError::Image(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Checkpoint(_) | TensorError::Io(_) | TensorError::UnknownParameter(_) => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<CondsaError> for CliError {
    fn from(e: CondsaError) -> Self {
        match e {
            CondsaError::Tensor(t) => t.into(),
            CondsaError::Config(m) => CliError::Usage(m),
            CondsaError::Noise(n) => n.into(),
            CondsaError::Image(i) => i.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<PriorNetError> for CliError {
    fn from(e: PriorNetError) -> Self {
        match e {
            PriorNetError::Tensor(t) => t.into(),
            PriorNetError::Config(m) => CliError::Usage(m),
            PriorNetError::Noise(n) => n.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Lonpe(l) => l.into(),
            HarnessError::Noise(n) => n.into(),
            HarnessError::Condsa(c) => c.into(),
            HarnessError::Image(i) => i.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}
