//! WebAssembly front end for the noise-prior toolkit.
//!
//! The page keeps one [`Session`]: a procedural grayscale scene plus its
//! noisy copy. Everything is seeded, so the same controls always redraw the
//! same pixels.

use noiseprior::harness::scenes;
use noiseprior::image_io::ImagePlane;
use noiseprior::lonpe::{fit_prior, plane_stats, select_smooth, LonpeConfig};
use noiseprior::noise_model::{expected_variance_curve, sample_noise, NoiseKind, NoisePrior, NoiseSpec};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Point {
    pub mean: f64,
    pub variance: f64,
    pub x: usize,
    pub y: usize,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub sigma_s: f64,
    pub sigma_r: f64,
    pub true_sigma_s: f64,
    pub true_sigma_r: f64,
    pub residual_rms: f64,
    pub patch_size: usize,
    pub points: Vec<Point>,
}

#[wasm_bindgen]
pub struct Session {
    clean: ImagePlane,
    noisy: ImagePlane,
    prior: NoisePrior,
}

impl Session {
    pub fn create(size: usize, scene_seed: u64) -> Result<Session, String> {
        if !(32..=1024).contains(&size) {
            return Err(format!("size {size} outside 32..=1024"));
        }
        let clean = scenes::gray_suite(1, size, size, scene_seed).remove(0);
        Ok(Session { noisy: clean.clone(), clean, prior: NoisePrior::ZERO })
    }

    pub fn apply_noise(&mut self, sigma_s: f64, sigma_r: f64, exact: bool, seed: u64) -> Result<(), String> {
        let prior = NoisePrior::new(sigma_s, sigma_r).map_err(|e| e.to_string())?;
        let kind = if exact { NoiseKind::ExactPoissonGaussian } else { NoiseKind::PoissonGaussian };
        let spec = NoiseSpec::new(kind, prior, seed).clipped(true);
        self.noisy = sample_noise(&self.clean, &spec).map_err(|e| e.to_string())?;
        self.prior = prior;
        Ok(())
    }

    pub fn run_estimate(&self, patch_size: usize, select_ratio: f64, filter: bool) -> Result<Estimate, String> {
        let config = LonpeConfig { patch_size, select_ratio, use_smoothness_filter: filter, ..LonpeConfig::default() };
        let stats = plane_stats(&self.noisy, patch_size).map_err(|e| e.to_string())?;
        let selected = select_smooth(&stats, &config).map_err(|e| e.to_string())?;
        let fit = fit_prior(&selected).map_err(|e| e.to_string())?;
        let points = stats
            .iter()
            .map(|s| Point {
                mean: s.mean,
                variance: s.variance,
                x: s.grid_x * patch_size,
                y: s.grid_y * patch_size,
                selected: selected.iter().any(|t| (t.grid_x, t.grid_y) == (s.grid_x, s.grid_y)),
            })
            .collect();
        Ok(Estimate {
            sigma_s: fit.prior.sigma_s,
            sigma_r: fit.prior.sigma_r,
            true_sigma_s: self.prior.sigma_s,
            true_sigma_r: self.prior.sigma_r,
            residual_rms: fit.residual_rms,
            patch_size,
            points,
        })
    }
}

#[wasm_bindgen]
impl Session {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, scene_seed: u32) -> Result<Session, JsError> {
        Session::create(size, scene_seed as u64).map_err(|e| JsError::new(&e))
    }

    pub fn size(&self) -> usize {
        self.clean.width
    }

    /// Replaces the noisy copy; `exact` picks the Poisson sampler over the
    /// Gaussian approximation.
    pub fn noise(&mut self, sigma_s: f64, sigma_r: f64, exact: bool, seed: u32) -> Result<(), JsError> {
        self.apply_noise(sigma_s, sigma_r, exact, seed as u64).map_err(|e| JsError::new(&e))
    }

    /// RGBA bytes of the noisy image, ready for `ImageData`.
    pub fn noisy_rgba(&self) -> Vec<u8> {
        to_rgba(&self.noisy)
    }

    pub fn clean_rgba(&self) -> Vec<u8> {
        to_rgba(&self.clean)
    }

    /// Patch scatter, selection and fitted prior as a JSON string.
    pub fn estimate(&self, patch_size: usize, select_ratio: f64, filter: bool) -> Result<String, JsError> {
        let e = self.run_estimate(patch_size, select_ratio, filter).map_err(|e| JsError::new(&e))?;
        serde_json::to_string(&e).map_err(|e| JsError::new(&e.to_string()))
    }
}

pub fn to_rgba(plane: &ImagePlane) -> Vec<u8> {
    let mut out = Vec::with_capacity(plane.data.len() * 4);
    for &v in &plane.data {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[g, g, g, 255]);
    }
    out
}

/// `[L0, Var0, L1, Var1, ...]` on `n` evenly spaced intensities in [0,1].
#[wasm_bindgen]
pub fn variance_curve(sigma_s: f64, sigma_r: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    let grid: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let prior = NoisePrior { sigma_s: sigma_s.max(0.0), sigma_r: sigma_r.max(0.0) };
    expected_variance_curve(prior, &grid).into_iter().flat_map(|(l, v)| [l, v]).collect()
}
