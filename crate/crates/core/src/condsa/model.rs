use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::image_io::ColorImage;
use crate::noise_model::NoisePrior;
use crate::tensor::{checkpoint, init, ParamStore, Tape, Tensor, Var};

use super::blocks::{condsa_block, register_block, transformer_block, BlockShape};
use super::CondsaError;

/// Which blocks make up the latent stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    Condsa,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CondformerConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub latent_blocks: usize,
    pub k: usize,
    pub ffn_expansion: usize,
    pub heads: usize,
    pub latent: LatentKind,
}

impl Default for CondformerConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            levels: 3,
            latent_blocks: 2,
            k: 8,
            ffn_expansion: 2,
            heads: 1,
            latent: LatentKind::Condsa,
        }
    }
}

impl CondformerConfig {
    pub fn validate(&self) -> Result<(), CondsaError> {
        let bad = |m: &str| Err(CondsaError::Config(m.to_string()));
        if self.base_channels == 0 || self.k == 0 || self.ffn_expansion == 0 {
            return bad("base_channels, k and ffn_expansion must be positive");
        }
        if self.heads == 0 || !self.base_channels.is_multiple_of(self.heads) {
            return bad("heads must divide base_channels");
        }
        if self.levels > 8 {
            return bad("at most 8 levels");
        }
        Ok(())
    }

    pub fn factor(&self) -> usize {
        1 << self.levels
    }

    fn block(&self, channels: usize, conditional: bool) -> BlockShape {
        BlockShape {
            channels,
            k: conditional.then_some(self.k),
            expansion: self.ffn_expansion,
            heads: self.heads,
        }
    }
}

/// U-shaped channel-attention denoiser with the prior injected in the
/// latent stack.
///
/// Parameters: `embed.w`; per level `l`: `enc.{l}.*`, `down.{l}`, `up.{l}`,
/// `fuse.{l}`, `dec.{l}.*`; `latent.{i}.*`; `out.w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Condformer {
    pub config: CondformerConfig,
    pub params: ParamStore,
}

impl Condformer {
    pub fn new(config: CondformerConfig, seed: u64) -> Result<Self, CondsaError> {
        config.validate()?;
        let c = config.base_channels;
        let mut s = ParamStore::new();
        s.add("embed.w", init::uniform(&[c, 3, 3, 3], 27, seed, "embed.w"))?;
        for l in 0..config.levels {
            let ch = c << l;
            register_block(&mut s, &format!("enc.{l}"), config.block(ch, false), seed)?;
            let name = format!("down.{l}");
            s.add(name.clone(), init::uniform(&[2 * ch, 4 * ch], 4 * ch, seed, &name))?;
        }
        let latent_ch = c << config.levels;
        for i in 0..config.latent_blocks {
            let cond = config.latent == LatentKind::Condsa;
            register_block(&mut s, &format!("latent.{i}"), config.block(latent_ch, cond), seed)?;
        }
        for l in (0..config.levels).rev() {
            let ch = c << l;
            let up = format!("up.{l}");
            s.add(up.clone(), init::uniform(&[4 * ch, 2 * ch], 2 * ch, seed, &up))?;
            let fuse = format!("fuse.{l}");
            s.add(fuse.clone(), init::uniform(&[ch, 2 * ch], 2 * ch, seed, &fuse))?;
            register_block(&mut s, &format!("dec.{l}"), config.block(ch, false), seed)?;
        }
        s.add("out.w", init::uniform(&[3, c, 3, 3], 9 * c, seed, "out.w"))?;
        Ok(Self { config, params: s })
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<(), CondsaError> {
        let f = self.config.factor();
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(CondsaError::NotDivisible { height, width, factor: f });
        }
        Ok(())
    }

    /// Records the network on `tape` for `input: [3,h,w]`. The output is
    /// `input + residual`, unclamped.
    pub fn forward(&self, tape: &mut Tape, input: Var, prior: NoisePrior) -> Result<Var, CondsaError> {
        let shape = tape.shape(input).to_vec();
        let &[3, h, w] = &shape[..] else {
            return Err(CondsaError::Shape(format!("expected [3,h,w], got {shape:?}")));
        };
        self.check_dims(h, w)?;
        let cfg = &self.config;
        let s = &self.params;
        let ew = tape.param_by_name(s, "embed.w")?;
        let mut x = tape.conv3x3(input, ew, 1)?;
        let mut skips = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            x = transformer_block(tape, s, &format!("enc.{l}"), x, None, cfg.heads)?;
            skips.push(x);
            let d = tape.space_to_depth(x)?;
            let dw = tape.param_by_name(s, &format!("down.{l}"))?;
            x = tape.conv1x1(d, dw)?;
        }
        for i in 0..cfg.latent_blocks {
            let prefix = format!("latent.{i}");
            x = match cfg.latent {
                LatentKind::Condsa => condsa_block(tape, s, &prefix, x, prior, cfg.k, cfg.heads)?,
                LatentKind::Plain => transformer_block(tape, s, &prefix, x, None, cfg.heads)?,
            };
        }
        for l in (0..cfg.levels).rev() {
            let uw = tape.param_by_name(s, &format!("up.{l}"))?;
            let u = tape.conv1x1(x, uw)?;
            let u = tape.depth_to_space(u)?;
            let cat = tape.concat(&[u, skips[l]], 0)?;
            let fw = tape.param_by_name(s, &format!("fuse.{l}"))?;
            x = tape.conv1x1(cat, fw)?;
            x = transformer_block(tape, s, &format!("dec.{l}"), x, None, cfg.heads)?;
        }
        let ow = tape.param_by_name(s, "out.w")?;
        let r = tape.conv3x3(x, ow, 1)?;
        Ok(tape.add(input, r)?)
    }

    /// Inference on a `[3,h,w]` tensor, clamped to `[0,1]`.
    pub fn predict(&self, noisy: &Tensor, prior: NoisePrior) -> Result<Tensor, CondsaError> {
        let mut tape = Tape::new();
        let x = tape.constant(noisy.clone());
        let y = self.forward(&mut tape, x, prior)?;
        let mut out = tape.value(y).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(out)
    }

    pub fn denoise(&self, img: &ColorImage, prior: NoisePrior) -> Result<ColorImage, CondsaError> {
        self.check_dims(img.height, img.width)?;
        let t = Tensor::new([3, img.height, img.width], img.to_chw())?;
        let out = self.predict(&t, prior)?;
        Ok(ColorImage::from_chw(img.width, img.height, out.data())?)
    }

    /// [`Condformer::denoise`] for arbitrary sizes: edge-replicates up to the
    /// next multiple of `2^levels` and crops back.
    pub fn denoise_padded(&self, img: &ColorImage, prior: NoisePrior) -> Result<ColorImage, CondsaError> {
        let f = self.config.factor();
        let (w, h) = (img.width.div_ceil(f) * f, img.height.div_ceil(f) * f);
        if (w, h) == (img.width, img.height) {
            return self.denoise(img, prior);
        }
        let src = img.to_chw();
        let mut padded = vec![0.0; 3 * w * h];
        for ch in 0..3 {
            for y in 0..h {
                let sy = y.min(img.height - 1);
                for x in 0..w {
                    let sx = x.min(img.width - 1);
                    padded[(ch * h + y) * w + x] = src[(ch * img.height + sy) * img.width + sx];
                }
            }
        }
        let out = self.denoise(&ColorImage::from_chw(w, h, &padded)?, prior)?;
        Ok(out.crop(0, 0, img.width, img.height)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CondsaError> {
        let cfg = serde_json::to_value(&self.config).map_err(|e| CondsaError::Config(e.to_string()))?;
        checkpoint::save(&self.params, serde_json::json!({ "model": cfg }), path)?;
        Ok(())
    }

    /// Rebuilds the architecture from the manifest and loads the weights.
    pub fn load(path: &Path) -> Result<Self, CondsaError> {
        let manifest = checkpoint::read_manifest(path)?;
        let config: CondformerConfig = serde_json::from_value(manifest.config["model"].clone())
            .map_err(|e| CondsaError::Config(format!("checkpoint manifest: {e}")))?;
        let mut model = Self::new(config, 0)?;
        checkpoint::load(&mut model.params, path)?;
        Ok(model)
    }
}
