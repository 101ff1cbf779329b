use serde::{Deserialize, Serialize};

use crate::image_io::ColorImage;
use crate::noise_model::NoisePrior;

use super::HarnessError;

/// `10 log10(1 / MSE)` over all samples; `+inf` when the inputs are equal.
pub fn psnr_slices(a: &[f64], b: &[f64]) -> Result<f64, HarnessError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(HarnessError::ShapeMismatch(format!("{} vs {} samples", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64, HarnessError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(HarnessError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    psnr_slices(&a.to_chw(), &b.to_chw())
}

/// Mean absolute percentage error per component, as fractions.
pub fn mape(estimates: &[NoisePrior], truth: NoisePrior) -> Result<(f64, f64), HarnessError> {
    if truth.sigma_s <= 0.0 || truth.sigma_r <= 0.0 {
        return Err(HarnessError::ZeroTruth);
    }
    if estimates.is_empty() {
        return Err(HarnessError::DataEmpty);
    }
    let n = estimates.len() as f64;
    let ds = estimates.iter().map(|e| (e.sigma_s - truth.sigma_s).abs() / truth.sigma_s).sum::<f64>() / n;
    let dr = estimates.iter().map(|e| (e.sigma_r - truth.sigma_r).abs() / truth.sigma_r).sum::<f64>() / n;
    Ok((ds, dr))
}

/// Mean, population standard deviation and quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear interpolation between closest ranks.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Self {
            n,
            mean,
            std,
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[n - 1],
        })
    }
}
