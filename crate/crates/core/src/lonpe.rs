//! Noise-prior estimation from a single noisy plane using local patch
//! statistics.
//!
//! Every patch of a non-overlapping grid yields a mean `L_i` and a population
//! variance `s_i^2`. In a patch without scene structure the variance is pure
//! noise, so `s_i^2 = sigma_s^2 * L_i + sigma_r^2`. Patches are ranked by the
//! smoothness score `s_i / sqrt(L_i)` (lower is flatter), the flattest fraction
//! is kept, and a line is fitted through the kept `(L_i, s_i^2)` points: the
//! slope is `sigma_s^2`, the intercept `sigma_r^2`.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image_io::{partition_patches, ImageError, ImagePlane, PatchView};
use crate::noise_model::NoisePrior;

/// Luminance spread below which `[L, 1]` is treated as rank one.
pub const RANK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LonpeError {
    #[error("empty patch")]
    EmptyPatch,
    #[error("too few patches: {found} usable, {required} required")]
    TooFewPatches { found: usize, required: usize },
    #[error("rank deficient: patch means span only {spread:e}")]
    RankDeficient { spread: f64 },
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchStats {
    pub mean: f64,
    pub variance: f64,
    /// `sqrt(variance / mean)`, `+inf` when the mean is not positive.
    pub smoothness: f64,
    pub grid_x: usize,
    pub grid_y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LonpeConfig {
    pub patch_size: usize,
    pub select_ratio: f64,
    pub use_smoothness_filter: bool,
    pub min_mean: f64,
    pub min_patches: usize,
    /// Drives the random subset when the smoothness filter is disabled.
    pub seed: u64,
}

impl Default for LonpeConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            select_ratio: 0.10,
            use_smoothness_filter: true,
            min_mean: 1e-4,
            min_patches: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clamped {
    None,
    SigmaS,
    SigmaR,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEstimate {
    #[serde(flatten)]
    pub prior: NoisePrior,
    pub residual_rms: f64,
    pub patches_used: usize,
    pub clamped: Clamped,
}

pub fn patch_stats(patch: &PatchView<'_>) -> Result<PatchStats, LonpeError> {
    let n = patch.size * patch.size;
    if n == 0 {
        return Err(LonpeError::EmptyPatch);
    }
    let mut stats = stats_of(patch.pixels(), n)?;
    stats.grid_x = patch.grid_x;
    stats.grid_y = patch.grid_y;
    Ok(stats)
}

/// Statistics of an arbitrary pixel sequence of known length (two-pass).
pub fn stats_of<I>(pixels: I, n: usize) -> Result<PatchStats, LonpeError>
where
    I: Iterator<Item = f64> + Clone,
{
    if n == 0 {
        return Err(LonpeError::EmptyPatch);
    }
    let mean = pixels.clone().sum::<f64>() / n as f64;
    let variance = pixels.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok(PatchStats {
        mean,
        variance,
        smoothness: smoothness(mean, variance),
        grid_x: 0,
        grid_y: 0,
    })
}

#[inline]
pub fn smoothness(mean: f64, variance: f64) -> f64 {
    if mean > 0.0 {
        variance.sqrt() / mean.sqrt()
    } else {
        f64::INFINITY
    }
}

/// Statistics of every grid patch of `plane`, row-major.
pub fn plane_stats(plane: &ImagePlane, patch_size: usize) -> Result<Vec<PatchStats>, LonpeError> {
    let patches = partition_patches(plane, patch_size)?;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        patches.par_iter().map(patch_stats).collect()
    }
    #[cfg(not(feature = "parallel"))]
    patches.iter().map(patch_stats).collect()
}

fn selection_size(n: usize, config: &LonpeConfig) -> usize {
    let ratio = config.select_ratio.clamp(0.0, 1.0);
    ((ratio * n as f64).ceil() as usize)
        .max(config.min_patches)
        .min(n)
}

/// Drops near-black patches, then keeps the `ceil(ratio * n)` smoothest (or a
/// seeded random subset of that size when the filter is off). The selection
/// never holds fewer than `min_patches` entries.
pub fn select_smooth(
    stats: &[PatchStats],
    config: &LonpeConfig,
) -> Result<Vec<PatchStats>, LonpeError> {
    let mut usable: Vec<PatchStats> = stats
        .iter()
        .filter(|s| s.mean >= config.min_mean)
        .copied()
        .collect();
    let required = config.min_patches.max(2);
    if usable.len() < required {
        return Err(LonpeError::TooFewPatches {
            found: usable.len(),
            required,
        });
    }
    let keep = selection_size(usable.len(), config);
    if config.use_smoothness_filter {
        usable.sort_by(|a, b| {
            a.smoothness
                .total_cmp(&b.smoothness)
                .then(a.grid_y.cmp(&b.grid_y))
                .then(a.grid_x.cmp(&b.grid_x))
        });
        usable.truncate(keep);
        Ok(usable)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut picked = index::sample(&mut rng, usable.len(), keep).into_vec();
        picked.sort_unstable();
        Ok(picked.into_iter().map(|i| usable[i]).collect())
    }
}

/// Least-squares line `variance = a * mean + b` through the selected patches,
/// with `a -> sigma_s^2` and `b -> sigma_r^2`.
///
/// A negative coefficient is clamped to zero and the other one is re-solved
/// as a one-parameter fit, which is the constrained optimum on that boundary.
pub fn fit_prior(selected: &[PatchStats]) -> Result<PriorEstimate, LonpeError> {
    if selected.len() < 2 {
        return Err(LonpeError::TooFewPatches {
            found: selected.len(),
            required: 2,
        });
    }
    let (lo, hi) = selected
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.mean), hi.max(s.mean))
        });
    if hi - lo < RANK_TOLERANCE {
        return Err(LonpeError::RankDeficient { spread: hi - lo });
    }
    let (a, b) = solve_normal_equations(selected);
    let (a, b, clamped) = clamp_solution(selected, a, b);
    let n = selected.len() as f64;
    let residual_rms = (selected
        .iter()
        .map(|s| (s.variance - a * s.mean - b).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(PriorEstimate {
        prior: NoisePrior {
            sigma_s: a.sqrt().min(1.0),
            sigma_r: b.sqrt().min(1.0),
        },
        residual_rms,
        patches_used: selected.len(),
        clamped,
    })
}

/// Solves `[S_LL S_L; S_L n] [a b]^T = [S_Lv S_v]^T` by elimination in
/// centered form.
pub fn solve_normal_equations(points: &[PatchStats]) -> (f64, f64) {
    let n = points.len() as f64;
    let l_bar = points.iter().map(|s| s.mean).sum::<f64>() / n;
    let v_bar = points.iter().map(|s| s.variance).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for s in points {
        let dl = s.mean - l_bar;
        sxx += dl * dl;
        sxy += dl * (s.variance - v_bar);
    }
    let a = sxy / sxx;
    (a, v_bar - a * l_bar)
}

fn clamp_solution(points: &[PatchStats], a: f64, b: f64) -> (f64, f64, Clamped) {
    if a >= 0.0 && b >= 0.0 {
        return (a, b, Clamped::None);
    }
    let n = points.len() as f64;
    // Candidate on the b = 0 edge: a = sum(L v) / sum(L^2).
    let slope_only = {
        let num: f64 = points.iter().map(|s| s.mean * s.variance).sum();
        let den: f64 = points.iter().map(|s| s.mean * s.mean).sum();
        num / den
    };
    // Candidate on the a = 0 edge: b = mean(v).
    let intercept_only = points.iter().map(|s| s.variance).sum::<f64>() / n;
    if b < 0.0 && slope_only >= 0.0 {
        (slope_only, 0.0, Clamped::SigmaR)
    } else if a < 0.0 && intercept_only >= 0.0 {
        (0.0, intercept_only, Clamped::SigmaS)
    } else {
        (0.0, 0.0, Clamped::Both)
    }
}

/// The full estimator on one plane: grid, statistics, selection, fit.
pub fn estimate(plane: &ImagePlane, config: &LonpeConfig) -> Result<PriorEstimate, LonpeError> {
    estimate_pooled(std::slice::from_ref(plane), config)
}

/// Pools the patch statistics of several planes that share one noise prior
/// (e.g. the channels of a color image) into a single selection and fit.
pub fn estimate_pooled(
    planes: &[ImagePlane],
    config: &LonpeConfig,
) -> Result<PriorEstimate, LonpeError> {
    let mut stats = Vec::new();
    for p in planes {
        stats.extend(plane_stats(p, config.patch_size)?);
    }
    let selected = select_smooth(&stats, config)?;
    fit_prior(&selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise_model::pixel_variance;

    fn point(mean: f64, variance: f64) -> PatchStats {
        PatchStats {
            mean,
            variance,
            smoothness: smoothness(mean, variance),
            grid_x: 0,
            grid_y: 0,
        }
    }

    #[test]
    fn constant_patch() {
        let p = ImagePlane::filled(16, 16, 0.25);
        let pv = &partition_patches(&p, 16).unwrap()[0];
        let s = patch_stats(pv).unwrap();
        assert_eq!((s.mean, s.variance, s.smoothness), (0.25, 0.0, 0.0));
    }

    #[test]
    fn two_pixel_patch() {
        let s = stats_of([0.0, 0.5].into_iter(), 2).unwrap();
        assert_eq!(s.mean, 0.25);
        assert_eq!(s.variance, 0.0625);
        assert_eq!(s.smoothness, 0.5);
    }

    #[test]
    fn dark_patch_is_never_smooth() {
        let s = stats_of([0.0, 0.0].into_iter(), 2).unwrap();
        assert_eq!(s.smoothness, f64::INFINITY);
        assert!(matches!(
            stats_of(std::iter::empty(), 0),
            Err(LonpeError::EmptyPatch)
        ));
    }

    #[test]
    fn gaussian_patch_variance() {
        use crate::noise_model::{sample_noise, NoiseKind, NoiseSpec};
        let clean = ImagePlane::filled(16, 16, 0.5);
        let spec = NoiseSpec::new(NoiseKind::Gaussian, NoisePrior::new(0.0, 0.01).unwrap(), 8);
        let noisy = sample_noise(&clean, &spec).unwrap();
        let s = patch_stats(&partition_patches(&noisy, 16).unwrap()[0]).unwrap();
        let se = 1e-4 * (2.0f64 / 255.0).sqrt();
        assert!((s.variance - 1e-4).abs() < 3.0 * se, "{}", s.variance);
    }

    #[test]
    fn smoothness_ties_break_row_major() {
        let stats: Vec<PatchStats> = (0..40)
            .map(|i| PatchStats {
                grid_x: i % 8,
                grid_y: i / 8,
                ..point(0.5, 0.0)
            })
            .rev()
            .collect();
        let cfg = LonpeConfig {
            min_patches: 2,
            ..Default::default()
        };
        let sel = select_smooth(&stats, &cfg).unwrap();
        assert_eq!(sel.len(), 4);
        let pos: Vec<_> = sel.iter().map(|s| (s.grid_y, s.grid_x)).collect();
        assert_eq!(pos, [(0, 0), (0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn edge_patch_excluded() {
        let mut stats: Vec<PatchStats> = (0..100)
            .map(|i| PatchStats {
                grid_x: i % 10,
                grid_y: i / 10,
                ..point(0.2 + 0.005 * i as f64, 0.001)
            })
            .collect();
        stats[37].variance = 0.2;
        stats[37].smoothness = smoothness(stats[37].mean, 0.2);
        let sel = select_smooth(&stats, &LonpeConfig::default()).unwrap();
        assert_eq!(sel.len(), 10);
        assert!(sel.iter().all(|s| (s.grid_x, s.grid_y) != (7, 3)));
    }

    #[test]
    fn random_arm_is_seeded() {
        let stats: Vec<PatchStats> = (0..200)
            .map(|i| PatchStats {
                grid_x: i,
                ..point(0.5, 0.001 * i as f64)
            })
            .collect();
        let cfg = LonpeConfig {
            use_smoothness_filter: false,
            seed: 11,
            ..Default::default()
        };
        let a = select_smooth(&stats, &cfg).unwrap();
        let b = select_smooth(&stats, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        let c = select_smooth(&stats, &LonpeConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dark_patches_dropped_and_counted() {
        let stats: Vec<PatchStats> = (0..10).map(|_| point(1e-6, 0.0)).collect();
        assert!(matches!(
            select_smooth(&stats, &LonpeConfig::default()),
            Err(LonpeError::TooFewPatches { found: 0, .. })
        ));
    }

    #[test]
    fn two_point_fit() {
        // Slope (0.0065 - 0.0041) / 0.6 = 0.004, intercept 0.0041 - 0.2 * 0.004.
        let est = fit_prior(&[point(0.2, 0.0041), point(0.8, 0.0065)]).unwrap();
        assert!((est.prior.sigma_s - 0.004f64.sqrt()).abs() < 1e-12);
        assert!((est.prior.sigma_r - 0.0033f64.sqrt()).abs() < 1e-12);
        assert!(est.residual_rms < 1e-12);
        assert_eq!(est.clamped, Clamped::None);
    }

    #[test]
    fn flat_luminance_is_rank_deficient() {
        let pts = vec![point(0.4, 0.01); 12];
        assert!(matches!(
            fit_prior(&pts),
            Err(LonpeError::RankDeficient { .. })
        ));
        assert!(matches!(
            fit_prior(&pts[..1]),
            Err(LonpeError::TooFewPatches { .. })
        ));
    }

    #[test]
    fn hundred_exact_points() {
        let p = NoisePrior::new(0.2, 0.01).unwrap();
        let pts: Vec<_> = (0..100)
            .map(|i| {
                let l = 0.05 + 0.009 * i as f64;
                point(l, pixel_variance(l, p))
            })
            .collect();
        let est = fit_prior(&pts).unwrap();
        assert!((est.prior.sigma_s - 0.2).abs() / 0.2 < 1e-9);
        assert!((est.prior.sigma_r - 0.01).abs() / 0.01 < 1e-9);
    }

    #[test]
    fn negative_intercept_clamps_and_refits() {
        // Line with negative intercept: v = 0.01 L - 0.002.
        let pts: Vec<_> = (1..=10)
            .map(|i| {
                let l = 0.1 * i as f64;
                point(l, (0.01 * l - 0.002).max(0.0))
            })
            .collect();
        let est = fit_prior(&pts).unwrap();
        assert_eq!(est.clamped, Clamped::SigmaR);
        assert_eq!(est.prior.sigma_r, 0.0);
        let num: f64 = pts.iter().map(|s| s.mean * s.variance).sum();
        let den: f64 = pts.iter().map(|s| s.mean * s.mean).sum();
        assert!((est.prior.sigma_s.powi(2) - num / den).abs() < 1e-15);
        assert!(!est.prior.sigma_s.is_nan());
    }

    #[test]
    fn negative_slope_clamps() {
        let pts: Vec<_> = (1..=10)
            .map(|i| point(0.1 * i as f64, 0.01 - 0.0005 * i as f64))
            .collect();
        let est = fit_prior(&pts).unwrap();
        assert_eq!(est.clamped, Clamped::SigmaS);
        assert_eq!(est.prior.sigma_s, 0.0);
        let mean_v = pts.iter().map(|p| p.variance).sum::<f64>() / 10.0;
        assert!((est.prior.sigma_r.powi(2) - mean_v).abs() < 1e-15);
    }

    #[test]
    fn constant_image_is_rank_deficient() {
        let p = ImagePlane::filled(128, 128, 0.3);
        assert!(matches!(
            estimate(&p, &LonpeConfig::default()),
            Err(LonpeError::RankDeficient { .. })
        ));
    }

    #[test]
    fn estimate_json_shape() {
        let est = fit_prior(&[point(0.2, 0.0041), point(0.8, 0.0065)]).unwrap();
        let v = serde_json::to_value(&est).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["clamped", "patches_used", "residual_rms", "sigma_r", "sigma_s"]
        );
        assert_eq!(v["clamped"], "none");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn exact_points(p: NoisePrior, ls: &[f64]) -> Vec<PatchStats> {
            ls.iter().map(|&l| point(l, pixel_variance(l, p))).collect()
        }

        proptest! {
            #[test]
            fn exact_recovery(
                s in 0.01f64..0.5,
                r in 0.01f64..0.5,
                ls in prop::collection::vec(0.01f64..1.0, 2..60),
            ) {
                let spread = ls.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    - ls.iter().cloned().fold(f64::INFINITY, f64::min);
                prop_assume!(spread > 0.05);
                let p = NoisePrior::new(s, r).unwrap();
                let est = fit_prior(&exact_points(p, &ls)).unwrap();
                prop_assert!((est.prior.sigma_s - s).abs() / s < 1e-9);
                prop_assert!((est.prior.sigma_r - r).abs() / r < 1e-9);
            }

            #[test]
            fn residual_orthogonal_to_design(
                pts in prop::collection::vec((0.01f64..1.0, 0.0f64..0.05), 3..50),
            ) {
                let stats: Vec<_> = pts.iter().map(|&(l, v)| point(l, v)).collect();
                let spread = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max)
                    - pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
                prop_assume!(spread > 0.05);
                let (a, b) = solve_normal_equations(&stats);
                let (mut dot_l, mut dot_1) = (0.0, 0.0);
                for s in &stats {
                    let r = s.variance - a * s.mean - b;
                    dot_l += r * s.mean;
                    dot_1 += r;
                }
                prop_assert!(dot_l.abs() < 1e-10 && dot_1.abs() < 1e-10);
            }

            #[test]
            fn smoothness_increases_with_variance(
                mean in 1e-3f64..1.0, v1 in 0.0f64..0.1, dv in 1e-9f64..0.1,
            ) {
                prop_assert!(smoothness(mean, v1 + dv) > smoothness(mean, v1));
            }

            #[test]
            fn clamping_never_nan(
                pts in prop::collection::vec((0.01f64..1.0, 0.0f64..0.02), 3..30),
            ) {
                let stats: Vec<_> = pts.iter().map(|&(l, v)| point(l, v)).collect();
                if let Ok(est) = fit_prior(&stats) {
                    prop_assert!(est.prior.sigma_s.is_finite() && est.prior.sigma_r.is_finite());
                    prop_assert!(est.prior.sigma_s >= 0.0 && est.prior.sigma_r >= 0.0);
                    if est.clamped == Clamped::SigmaR || est.clamped == Clamped::Both {
                        prop_assert_eq!(est.prior.sigma_r, 0.0);
                    }
                }
            }
        }
    }
}
