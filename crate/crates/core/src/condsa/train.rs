use std::sync::mpsc::sync_channel;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image_io::ColorImage;
use crate::noise_model::{sample_noise_color, NoiseKind, NoisePrior, NoiseSpec};
use crate::tensor::{adam_step, cosine_lr, init::name_seed, AdamConfig, AdamState, ParamGrads, ParamStore, Tape, Tensor, Var};

use super::{Condformer, CondsaError};

/// Which prior the model sees during training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    True,
    Zero,
}

impl PriorMode {
    pub fn apply(self, prior: NoisePrior) -> NoisePrior {
        match self {
            PriorMode::True => prior,
            PriorMode::Zero => NoisePrior::ZERO,
        }
    }
}

/// Uniform ranges the training priors are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseMix {
    pub kind: NoiseKind,
    pub sigma_s_max: f64,
    pub sigma_r_max: f64,
    pub clip: bool,
}

impl Default for NoiseMix {
    fn default() -> Self {
        Self {
            kind: NoiseKind::PoissonGaussian,
            sigma_s_max: 0.3,
            sigma_r_max: 50.0 / 255.0,
            clip: true,
        }
    }
}

impl NoiseMix {
    pub fn draw(&self, rng: &mut impl Rng) -> NoisePrior {
        NoisePrior {
            sigma_s: rng.random::<f64>() * self.sigma_s_max,
            sigma_r: rng.random::<f64>() * self.sigma_r_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub queue_capacity: usize,
    pub prior_mode: PriorMode,
    pub noise: NoiseMix,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            crop: 32,
            lr_max: 1e-3,
            lr_min: 1e-6,
            adam: AdamConfig::default(),
            seed: 0,
            queue_capacity: 4,
            prior_mode: PriorMode::True,
            noise: NoiseMix::default(),
        }
    }
}

/// One training pair as `[3,h,w]` tensors plus the prior that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub noisy: Tensor,
    pub clean: Tensor,
    pub prior: NoisePrior,
}

/// Source of training pairs. `sample` must be a pure function of its
/// arguments so that training is reproducible.
pub trait PairSource: Sync {
    fn len(&self) -> usize;
    fn sample(&self, step: usize, item: usize) -> Result<Sample, CondsaError>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Random crops of clean images, corrupted with a fresh prior per crop.
#[derive(Debug, Clone)]
pub struct SyntheticPairs {
    pub images: Vec<ColorImage>,
    pub crop: usize,
    pub noise: NoiseMix,
    pub seed: u64,
}

pub fn image_tensor(img: &ColorImage) -> Tensor {
    Tensor::new([3, img.height, img.width], img.to_chw()).unwrap()
}

/// Corrupts `clean` with `prior` under the mix's kind and clipping.
pub fn make_sample(clean: &ColorImage, prior: NoisePrior, noise: &NoiseMix, seed: u64) -> Result<Sample, CondsaError> {
    let spec = NoiseSpec::new(noise.kind, prior, seed).clipped(noise.clip);
    let noisy = sample_noise_color(clean, &spec)?;
    Ok(Sample {
        noisy: image_tensor(&noisy),
        clean: image_tensor(clean),
        prior,
    })
}

impl PairSource for SyntheticPairs {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn sample(&self, step: usize, item: usize) -> Result<Sample, CondsaError> {
        if self.images.is_empty() {
            return Err(CondsaError::DataEmpty);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, &format!("pair/{step}/{item}")));
        let img = &self.images[rng.random_range(0..self.images.len())];
        if img.width < self.crop || img.height < self.crop {
            return Err(CondsaError::Shape(format!(
                "{}x{} image smaller than crop {}",
                img.width, img.height, self.crop
            )));
        }
        let x0 = rng.random_range(0..=img.width - self.crop);
        let y0 = rng.random_range(0..=img.height - self.crop);
        let clean = img.crop(x0, y0, self.crop, self.crop)?;
        let prior = self.noise.draw(&mut rng);
        make_sample(&clean, prior, &self.noise, rng.random())
    }
}

fn item_loss(model: &Condformer, s: &Sample, mode: PriorMode) -> Result<(f64, ParamGrads), CondsaError> {
    let mut tape = Tape::new();
    let x = tape.constant(s.noisy.clone());
    let t = tape.constant(s.clean.clone());
    let y: Var = model.forward(&mut tape, x, mode.apply(s.prior))?;
    let loss = tape.l1_loss(y, t)?;
    let value = tape.value(loss).data()[0];
    Ok((value, tape.backward_collect(loss)?))
}

/// One optimizer step on a batch; returns the mean L1 loss. Items run in
/// parallel on their own tapes and their gradients are summed in item order.
pub fn train_step(
    model: &mut Condformer,
    adam: &mut AdamState,
    batch: &[Sample],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64, CondsaError> {
    if batch.is_empty() {
        return Err(CondsaError::DataEmpty);
    }
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        let m = &*model;
        batch.par_iter().map(|s| item_loss(m, s, cfg.prior_mode)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = batch.iter().map(|s| item_loss(model, s, cfg.prior_mode)).collect();
    let params: &mut ParamStore = &mut model.params;
    params.zero_grad();
    let mut total = 0.0;
    for r in results {
        let (l, g) = r?;
        total += l;
        params.accumulate(&g);
    }
    let n = batch.len() as f64;
    params.scale_grads(1.0 / n);
    adam_step(params, adam, &cfg.adam, lr);
    Ok(total / n)
}

/// Trains `model` in place and returns the per-step loss curve. A producer
/// thread fills a bounded queue with batches while the optimizer consumes
/// them.
pub fn train_denoiser<S: PairSource>(model: &mut Condformer, data: &S, cfg: &TrainConfig) -> Result<Vec<f64>, CondsaError> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(CondsaError::DataEmpty);
    }
    let mut adam = AdamState::new(&model.params);
    let mut losses = Vec::with_capacity(cfg.steps);
    std::thread::scope(|scope| {
        let (tx, rx) = sync_channel::<Result<Vec<Sample>, CondsaError>>(cfg.queue_capacity.max(1));
        scope.spawn(move || {
            for step in 0..cfg.steps {
                let batch = (0..cfg.batch_size).map(|i| data.sample(step, i)).collect();
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        for step in 0..cfg.steps {
            let batch = rx.recv().map_err(|_| CondsaError::DataEmpty)??;
            let lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min);
            losses.push(train_step(model, &mut adam, &batch, cfg, lr)?);
        }
        Ok::<_, CondsaError>(())
    })?;
    Ok(losses)
}
