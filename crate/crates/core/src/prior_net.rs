//! A small learnable noise-prior estimator for colour images.
//!
//! Four stride-2 3x3 convolutions (with bias and GELU) feed two fully
//! connected layers with a two-unit head. A prediction averages the head
//! logits over seeded random patches and squashes them with the logistic
//! function, so both components always lie in `[0, 1]`.

use std::path::Path;
use std::sync::mpsc::sync_channel;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condsa::train::image_tensor;
use crate::image_io::{ColorImage, ImageError};
use crate::noise_model::{sample_noise_color, NoiseError, NoiseKind, NoisePrior, NoiseSpec};
use crate::tensor::{
    adam_step, checkpoint, cosine_lr, init, init::name_seed, AdamConfig, AdamState, ParamGrads, ParamStore, Tape,
    Tensor, TensorError, Var,
};

#[derive(Debug, Error)]
pub enum PriorNetError {
    #[error("image {width}x{height} is smaller than the {patch}x{patch} patch")]
    ImageTooSmall { width: usize, height: usize, patch: usize },
    #[error("no training data")]
    DataEmpty,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorNetConfig {
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub conv_widths: Vec<usize>,
    pub fc_hidden: usize,
    /// Patches enter the network as `gain * (v - 0.5)`.
    pub input_gain: f64,
}

impl Default for PriorNetConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            patches_per_image: 8,
            conv_widths: vec![8, 16, 16, 32],
            fc_hidden: 32,
            input_gain: 4.0,
        }
    }
}

impl PriorNetConfig {
    pub fn validate(&self) -> Result<(), PriorNetError> {
        if self.patch_size == 0 || self.patches_per_image == 0 || self.fc_hidden == 0 {
            return Err(PriorNetError::Config("sizes must be positive".into()));
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(PriorNetError::Config("conv widths must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// Spatial side after the strided stack.
    fn feature_side(&self) -> usize {
        self.conv_widths.iter().fold(self.patch_size, |s, _| s.div_ceil(2))
    }

    fn flat_len(&self) -> usize {
        let s = self.feature_side();
        self.conv_widths.last().unwrap() * s * s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorNet {
    pub config: PriorNetConfig,
    pub params: ParamStore,
}

impl PriorNet {
    pub fn new(config: PriorNetConfig, seed: u64) -> Result<Self, PriorNetError> {
        config.validate()?;
        let mut s = ParamStore::new();
        let mut cin = 3;
        for (i, &w) in config.conv_widths.iter().enumerate() {
            let name = format!("conv.{i}.w");
            s.add(name.clone(), init::uniform(&[w, cin, 3, 3], 9 * cin, seed, &name))?;
            s.add(format!("conv.{i}.b"), Tensor::zeros([w]))?;
            cin = w;
        }
        let flat = config.flat_len();
        s.add("fc1.w", init::uniform(&[config.fc_hidden, flat], flat, seed, "fc1.w"))?;
        s.add("fc1.b", Tensor::zeros([config.fc_hidden]))?;
        s.add("fc2.w", init::uniform(&[2, config.fc_hidden], config.fc_hidden, seed, "fc2.w"))?;
        s.add("fc2.b", Tensor::zeros([2]))?;
        Ok(Self { config, params: s })
    }

    /// Head logits `[2, 1]` for one patch `[3, p, p]`.
    pub fn logits(&self, tape: &mut Tape, patch: Var) -> Result<Var, PriorNetError> {
        let mut x = patch;
        for i in 0..self.config.conv_widths.len() {
            let w = tape.param_by_name(&self.params, &format!("conv.{i}.w"))?;
            let b = tape.param_by_name(&self.params, &format!("conv.{i}.b"))?;
            let y = tape.conv3x3(x, w, 2)?;
            let y = tape.add_channel_bias(y, b)?;
            x = tape.gelu(y);
        }
        let flat = tape.reshape(x, &[self.config.flat_len(), 1])?;
        let mut h = flat;
        for (layer, act) in [("fc1", true), ("fc2", false)] {
            let w = tape.param_by_name(&self.params, &format!("{layer}.w"))?;
            let b = tape.param_by_name(&self.params, &format!("{layer}.b"))?;
            let y = tape.conv1x1(h, w)?;
            let y = tape.add_channel_bias(y, b)?;
            h = if act { tape.gelu(y) } else { y };
        }
        Ok(h)
    }

    /// Top-left corners of the patches a prediction with `seed` reads.
    pub fn patch_origins(&self, width: usize, height: usize, seed: u64) -> Result<Vec<(usize, usize)>, PriorNetError> {
        let p = self.config.patch_size;
        if width < p || height < p {
            return Err(PriorNetError::ImageTooSmall { width, height, patch: p });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, "prior-net/patches"));
        Ok((0..self.config.patches_per_image)
            .map(|_| (rng.random_range(0..=width - p), rng.random_range(0..=height - p)))
            .collect())
    }

    /// Mean-logit prediction on `tape`, squashed to `[2, 1]` in `[0, 1]`.
    fn record(&self, tape: &mut Tape, img: &ColorImage, seed: u64) -> Result<Var, PriorNetError> {
        let p = self.config.patch_size;
        let origins = self.patch_origins(img.width, img.height, seed)?;
        let mut acc: Option<Var> = None;
        for (x, y) in origins {
            let t = image_tensor(&img.crop(x, y, p, p)?.map(|v| self.config.input_gain * (v - 0.5)));
            let v = tape.constant(t);
            let l = self.logits(tape, v)?;
            acc = Some(match acc {
                None => l,
                Some(a) => tape.add(a, l)?,
            });
        }
        let mean = tape.scale(acc.unwrap(), 1.0 / self.config.patches_per_image as f64);
        Ok(tape.sigmoid(mean))
    }

    pub fn predict(&self, img: &ColorImage, seed: u64) -> Result<NoisePrior, PriorNetError> {
        let mut tape = Tape::new();
        let out = self.record(&mut tape, img, seed)?;
        let d = tape.value(out).data();
        Ok(NoisePrior { sigma_s: d[0], sigma_r: d[1] })
    }

    pub fn save(&self, path: &Path) -> Result<(), PriorNetError> {
        let cfg = serde_json::to_value(&self.config).map_err(|e| PriorNetError::Config(e.to_string()))?;
        checkpoint::save(&self.params, serde_json::json!({ "prior_net": cfg }), path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PriorNetError> {
        let manifest = checkpoint::read_manifest(path)?;
        let config: PriorNetConfig = serde_json::from_value(manifest.config["prior_net"].clone())
            .map_err(|e| PriorNetError::Config(format!("checkpoint manifest: {e}")))?;
        let mut net = Self::new(config, 0)?;
        checkpoint::load(&mut net.params, path)?;
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub queue_capacity: usize,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            lr_max: 1e-3,
            lr_min: 1e-6,
            adam: AdamConfig::default(),
            seed: 0,
            queue_capacity: 4,
        }
    }
}

fn item_loss(net: &PriorNet, img: &ColorImage, target: NoisePrior, seed: u64) -> Result<(f64, ParamGrads), PriorNetError> {
    let mut tape = Tape::new();
    let pred = net.record(&mut tape, img, seed)?;
    let t = tape.constant(Tensor::new(vec![2, 1], vec![target.sigma_s, target.sigma_r])?);
    let loss = tape.l1_loss(pred, t)?;
    let value = tape.value(loss).data()[0];
    Ok((value, tape.backward_collect(loss)?))
}

/// Minimizes the L1 distance between predicted and target priors. Each step
/// draws a batch of dataset indices and fresh patch positions; returns the
/// per-step mean loss.
pub fn train_prior_net(
    net: &mut PriorNet,
    data: &[(ColorImage, NoisePrior)],
    cfg: &PriorTrainConfig,
) -> Result<Vec<f64>, PriorNetError> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(PriorNetError::DataEmpty);
    }
    let mut adam = AdamState::new(&net.params);
    let mut losses = Vec::with_capacity(cfg.steps);
    std::thread::scope(|scope| {
        let (tx, rx) = sync_channel::<Vec<(usize, u64)>>(cfg.queue_capacity.max(1));
        scope.spawn(move || {
            for step in 0..cfg.steps {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, &format!("prior-batch/{step}")));
                let batch = (0..cfg.batch_size).map(|_| (rng.random_range(0..data.len()), rng.random())).collect();
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        for step in 0..cfg.steps {
            let batch = rx.recv().map_err(|_| PriorNetError::DataEmpty)?;
            let results: Vec<_> = {
                let n = &*net;
                let f = |&(i, s): &(usize, u64)| item_loss(n, &data[i].0, data[i].1, s);
                #[cfg(feature = "parallel")]
                {
                    use rayon::prelude::*;
                    batch.par_iter().map(f).collect()
                }
                #[cfg(not(feature = "parallel"))]
                batch.iter().map(f).collect()
            };
            net.params.zero_grad();
            let mut total = 0.0;
            for r in results {
                let (l, g) = r?;
                total += l;
                net.params.accumulate(&g);
            }
            let n = batch.len() as f64;
            net.params.scale_grads(1.0 / n);
            adam_step(&mut net.params, &mut adam, &cfg.adam, cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min));
            losses.push(total / n);
        }
        Ok::<_, PriorNetError>(())
    })?;
    Ok(losses)
}

/// Noisy copies of `clean`, each with a prior drawn uniformly from the given
/// ranges. Synthesis is clipped to `[0, 1]` like a real sRGB capture.
pub fn synthetic_dataset(
    clean: &[ColorImage],
    sigma_s: (f64, f64),
    sigma_r: (f64, f64),
    kind: NoiseKind,
    seed: u64,
) -> Result<Vec<(ColorImage, NoisePrior)>, PriorNetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, "prior-dataset"));
    clean
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let prior = NoisePrior {
                sigma_s: rng.random_range(sigma_s.0..=sigma_s.1),
                sigma_r: rng.random_range(sigma_r.0..=sigma_r.1),
            };
            let spec = NoiseSpec::new(kind, prior, name_seed(seed, &format!("prior-noise/{i}"))).clipped(true);
            Ok((sample_noise_color(img, &spec)?, prior))
        })
        .collect()
}
