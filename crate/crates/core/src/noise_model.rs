//! Sensor noise synthesis.
//!
//! A pixel with clean intensity `L` observed through a sensor with noise prior
//! `(sigma_s, sigma_r)` has variance `sigma_s^2 * L + sigma_r^2`: a Poisson
//! shot component whose variance grows with the signal, plus signal-independent
//! Gaussian read noise.
//!
//! Draws are made from one ChaCha stream per image row (`stream = channel <<
//! 32 | row`), so any row can be regenerated independently of the others and
//! rows may be filled in parallel without changing the result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image_io::{ColorImage, ImagePlane};

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("invalid noise spec: {0}")]
    InvalidSpec(String),
}

/// The pair `(sigma_s, sigma_r)` in the normalized `[0, 1]` intensity scale.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoisePrior {
    pub sigma_s: f64,
    pub sigma_r: f64,
}

impl NoisePrior {
    pub const ZERO: NoisePrior = NoisePrior {
        sigma_s: 0.0,
        sigma_r: 0.0,
    };

    pub fn new(sigma_s: f64, sigma_r: f64) -> Result<Self, NoiseError> {
        let p = Self { sigma_s, sigma_r };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        for (name, v) in [("sigma_s", self.sigma_s), ("sigma_r", self.sigma_r)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(NoiseError::InvalidSpec(format!("{name}={v} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.sigma_s, self.sigma_r]
    }
}

/// Variance of a pixel with clean intensity `l` under `prior`.
#[inline]
pub fn pixel_variance(l: f64, prior: NoisePrior) -> f64 {
    prior.sigma_s * prior.sigma_s * l + prior.sigma_r * prior.sigma_r
}

/// `(L, variance)` pairs along `l_grid`. The curve is a line with slope
/// `sigma_s^2` and intercept `sigma_r^2`.
pub fn expected_variance_curve(prior: NoisePrior, l_grid: &[f64]) -> Vec<(f64, f64)> {
    l_grid
        .iter()
        .map(|&l| (l, pixel_variance(l, prior)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// i.i.d. `N(0, sigma_r^2)`.
    Gaussian,
    /// `sv_map * N(0, 1)`, per-pixel standard deviation supplied by the caller.
    SvGaussian,
    /// Heteroscedastic Gaussian `N(0, sigma_s^2 L + sigma_r^2)`.
    PoissonGaussian,
    /// `sigma_s^2 * Poisson(L / sigma_s^2) + N(0, sigma_r^2)`.
    ExactPoissonGaussian,
}

impl std::str::FromStr for NoiseKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "gaussian" => Ok(Self::Gaussian),
            "sv_gaussian" => Ok(Self::SvGaussian),
            "poisson_gaussian" => Ok(Self::PoissonGaussian),
            "exact_poisson_gaussian" => Ok(Self::ExactPoissonGaussian),
            _ => Err(format!("unknown noise kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(flatten)]
    pub prior: NoisePrior,
    #[serde(skip)]
    pub sv_map: Option<ImagePlane>,
    pub clip: bool,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, prior: NoisePrior, seed: u64) -> Self {
        Self {
            kind,
            prior,
            sv_map: None,
            clip: false,
            seed,
        }
    }

    pub fn clipped(mut self, clip: bool) -> Self {
        self.clip = clip;
        self
    }

    pub fn with_sv_map(mut self, map: ImagePlane) -> Self {
        self.sv_map = Some(map);
        self
    }

    fn validate(&self, width: usize, height: usize) -> Result<(), NoiseError> {
        self.prior.validate()?;
        match (self.kind, &self.sv_map) {
            (NoiseKind::SvGaussian, None) => {
                Err(NoiseError::InvalidSpec("sv_gaussian requires sv_map".into()))
            }
            (NoiseKind::SvGaussian, Some(m)) if m.width != width || m.height != height => {
                Err(NoiseError::InvalidSpec(format!(
                    "sv_map is {}x{}, image is {width}x{height}",
                    m.width, m.height
                )))
            }
            (NoiseKind::SvGaussian, Some(_)) => Ok(()),
            (_, Some(_)) => Err(NoiseError::InvalidSpec(
                "sv_map only valid for sv_gaussian".into(),
            )),
            (_, None) => Ok(()),
        }
    }
}

fn row_rng(seed: u64, channel: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((channel << 32) | row as u64);
    rng
}

fn fill_row(
    clean: &[f64],
    sv_row: Option<&[f64]>,
    out: &mut [f64],
    spec: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) {
    let NoisePrior { sigma_s, sigma_r } = spec.prior;
    let gain = sigma_s * sigma_s;
    for (i, (&l, o)) in clean.iter().zip(out.iter_mut()).enumerate() {
        let v = match spec.kind {
            NoiseKind::Gaussian => {
                let n: f64 = StandardNormal.sample(rng);
                l + sigma_r * n
            }
            NoiseKind::SvGaussian => {
                let n: f64 = StandardNormal.sample(rng);
                l + sv_row.map_or(0.0, |m| m[i]) * n
            }
            NoiseKind::PoissonGaussian => {
                let n: f64 = StandardNormal.sample(rng);
                l + pixel_variance(l.max(0.0), spec.prior).sqrt() * n
            }
            NoiseKind::ExactPoissonGaussian => {
                let shot = if gain > 0.0 && l > 0.0 {
                    // Poisson::new only fails for non-positive or non-finite rates.
                    let count: f64 = Poisson::new(l / gain)
                        .map(|p| p.sample(rng))
                        .unwrap_or(0.0);
                    count * gain
                } else {
                    l
                };
                let n: f64 = StandardNormal.sample(rng);
                shot + sigma_r * n
            }
        };
        *o = if spec.clip { v.clamp(0.0, 1.0) } else { v };
    }
}

/// Adds noise drawn according to `spec` to `clean`. Deterministic in
/// `spec.seed`.
pub fn sample_noise(clean: &ImagePlane, spec: &NoiseSpec) -> Result<ImagePlane, NoiseError> {
    sample_noise_channel(clean, spec, 0)
}

fn sample_noise_channel(
    clean: &ImagePlane,
    spec: &NoiseSpec,
    channel: u64,
) -> Result<ImagePlane, NoiseError> {
    spec.validate(clean.width, clean.height)?;
    if let Some(v) = clean.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(NoiseError::InvalidSpec(format!(
            "clean value {v} outside [0,1]"
        )));
    }
    let mut out = clean.clone();
    if spec.prior == NoisePrior::ZERO && spec.kind != NoiseKind::SvGaussian {
        return Ok(out);
    }
    let w = clean.width;
    let fill = |(y, row): (usize, &mut [f64])| {
        let mut rng = row_rng(spec.seed, channel, y);
        let sv = spec.sv_map.as_ref().map(|m| m.row(y));
        fill_row(clean.row(y), sv, row, spec, &mut rng);
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.data.par_chunks_mut(w).enumerate().for_each(fill);
    }
    #[cfg(not(feature = "parallel"))]
    out.data.chunks_mut(w).enumerate().for_each(fill);
    Ok(out)
}

/// Noise for each color channel, drawn from independent streams.
pub fn sample_noise_color(clean: &ColorImage, spec: &NoiseSpec) -> Result<ColorImage, NoiseError> {
    let [r, g, b] = &clean.channels;
    Ok(ColorImage {
        width: clean.width,
        height: clean.height,
        channels: [
            sample_noise_channel(r, spec, 0)?,
            sample_noise_channel(g, spec, 1)?,
            sample_noise_channel(b, spec, 2)?,
        ],
    })
}
