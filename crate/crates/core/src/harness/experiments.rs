use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condsa::{train_denoiser, Condformer, CondformerConfig, LatentKind, NoiseMix, PriorMode, SyntheticPairs, TrainConfig};
use crate::image_io::{ColorImage, ImagePlane};
use crate::lonpe::{estimate, estimate_pooled, LonpeConfig};
use crate::noise_model::{sample_noise, sample_noise_color, NoiseKind, NoisePrior, NoiseSpec};
use crate::tensor::init::name_seed;

use super::metrics::{mape, psnr};
use super::report::{ExperimentReport, Record};
use super::scenes;
use super::HarnessError;

fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// The three corruption levels of the sweep: mild, moderate, severe.
pub fn default_sweep_priors() -> Vec<NoisePrior> {
    vec![
        NoisePrior { sigma_s: 0.05, sigma_r: 0.02 },
        NoisePrior { sigma_s: 0.10, sigma_r: 0.04 },
        NoisePrior { sigma_s: 0.15, sigma_r: 0.08 },
    ]
}

pub fn prior_label(p: NoisePrior) -> String {
    format!("s{:.3}_r{:.3}", p.sigma_s, p.sigma_r)
}

/// Synthesizes every (prior, image) cell without clipping and estimates the
/// prior back.
pub fn run_estimation_sweep(
    images: &[ImagePlane],
    priors: &[NoisePrior],
    config: &LonpeConfig,
    kind: NoiseKind,
    seed: u64,
) -> Result<ExperimentReport, HarnessError> {
    if images.is_empty() || priors.is_empty() {
        return Err(HarnessError::DataEmpty);
    }
    let start = Instant::now();
    let cells: Vec<(usize, usize)> = (0..priors.len())
        .flat_map(|p| (0..images.len()).map(move |i| (p, i)))
        .collect();
    let results = par_map(&cells, |_, &(p, i)| {
        let spec = NoiseSpec::new(kind, priors[p], name_seed(seed, &format!("sweep/{p}/{i}")));
        let noisy = sample_noise(&images[i], &spec)?;
        Ok::<_, HarnessError>(estimate(&noisy, config)?)
    });
    let mut report = ExperimentReport::new(
        "estimation_sweep",
        serde_json::json!({ "lonpe": config, "kind": kind, "seed": seed, "images": images.len() }),
    );
    report.header.push("synthesis unclipped".into());
    for (&(p, i), r) in cells.iter().zip(results) {
        let est = r?;
        let truth = priors[p];
        report.records.push(Record::new(
            prior_label(truth),
            i,
            &[
                ("est_s", est.prior.sigma_s),
                ("est_r", est.prior.sigma_r),
                ("abs_err_s", (est.prior.sigma_s - truth.sigma_s).abs()),
                ("abs_err_r", (est.prior.sigma_r - truth.sigma_r).abs()),
                ("patches_used", est.patches_used as f64),
            ],
        ));
    }
    report.aggregate();
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LonpeArm {
    pub patch_size: usize,
    pub select_ratio: f64,
    pub use_smoothness_filter: bool,
}

impl LonpeArm {
    pub fn new(patch_size: usize, select_ratio: f64, use_smoothness_filter: bool) -> Self {
        Self { patch_size, select_ratio, use_smoothness_filter }
    }

    pub fn label(&self) -> String {
        format!(
            "{0}x{0}/{1}%/{2}",
            self.patch_size,
            (self.select_ratio * 100.0).round(),
            if self.use_smoothness_filter { "on" } else { "off" }
        )
    }
}

/// Full grid: patch size {8,16,32} x ratio {5,10,20}% x filter on/off.
pub fn default_arms() -> Vec<LonpeArm> {
    let mut arms = Vec::new();
    for o in [8, 16, 32] {
        for r in [0.05, 0.10, 0.20] {
            for f in [true, false] {
                arms.push(LonpeArm::new(o, r, f));
            }
        }
    }
    arms
}

/// Reference values for the best arm (16x16, 10%, filter on).
pub const REFERENCE_MAPE: (f64, f64) = (0.029, 0.021);

/// MAPE of every arm on the same noisy images. Derived keys:
/// `mape_s/{arm}` and `mape_r/{arm}`.
pub fn run_ablation_lonpe(
    images: &[ImagePlane],
    arms: &[LonpeArm],
    truth: NoisePrior,
    kind: NoiseKind,
    seed: u64,
) -> Result<ExperimentReport, HarnessError> {
    if images.is_empty() || arms.is_empty() {
        return Err(HarnessError::DataEmpty);
    }
    let start = Instant::now();
    let noisy = par_map(images, |i, img| {
        let spec = NoiseSpec::new(kind, truth, name_seed(seed, &format!("ablation/{i}")));
        sample_noise(img, &spec)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let mut report = ExperimentReport::new(
        "lonpe_ablation",
        serde_json::json!({ "arms": arms, "truth": truth, "kind": kind, "seed": seed, "images": images.len() }),
    );
    report.header.push("synthesis unclipped".into());
    report.derived.insert("reference_mape_s".into(), REFERENCE_MAPE.0);
    report.derived.insert("reference_mape_r".into(), REFERENCE_MAPE.1);
    for arm in arms {
        let label = arm.label();
        let results = par_map(&noisy, |i, img| {
            let cfg = LonpeConfig {
                patch_size: arm.patch_size,
                select_ratio: arm.select_ratio,
                use_smoothness_filter: arm.use_smoothness_filter,
                seed: name_seed(seed, &format!("random-arm/{i}")),
                ..LonpeConfig::default()
            };
            estimate(img, &cfg)
        });
        let mut ests = Vec::with_capacity(results.len());
        for (i, r) in results.into_iter().enumerate() {
            let e = r?;
            report.records.push(Record::new(
                label.clone(),
                i,
                &[
                    ("est_s", e.prior.sigma_s),
                    ("est_r", e.prior.sigma_r),
                    ("ape_s", (e.prior.sigma_s - truth.sigma_s).abs() / truth.sigma_s),
                    ("ape_r", (e.prior.sigma_r - truth.sigma_r).abs() / truth.sigma_r),
                ],
            ));
            ests.push(e.prior);
        }
        let (ds, dr) = mape(&ests, truth)?;
        report.derived.insert(format!("mape_s/{label}"), ds);
        report.derived.insert(format!("mape_r/{label}"), dr);
    }
    report.aggregate();
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

/// A held-out noisy/clean pair with the prior that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub clean: ColorImage,
    pub noisy: ColorImage,
    pub prior: NoisePrior,
}

/// One scene per item, each corrupted with its own prior drawn from `mix`.
pub fn make_eval_set(count: usize, size: usize, mix: &NoiseMix, seed: u64) -> Result<Vec<EvalItem>, HarnessError> {
    let clean = scenes::suite(count, size, size, name_seed(seed, "eval-scenes"));
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, "eval-priors"));
    let priors: Vec<NoisePrior> = (0..count).map(|_| mix.draw(&mut rng)).collect();
    clean
        .into_iter()
        .zip(priors)
        .enumerate()
        .map(|(i, (clean, prior))| {
            let spec = NoiseSpec::new(mix.kind, prior, name_seed(seed, &format!("eval-noise/{i}"))).clipped(mix.clip);
            let noisy = sample_noise_color(&clean, &spec)?;
            Ok(EvalItem { clean, noisy, prior })
        })
        .collect()
}

/// PSNR of `model` on every item, fed the prior chosen by `prior_of`.
pub fn evaluate<F>(model: &Condformer, items: &[EvalItem], prior_of: F) -> Result<Vec<f64>, HarnessError>
where
    F: Fn(&EvalItem) -> Result<NoisePrior, HarnessError> + Sync + Send,
{
    par_map(items, |_, it| {
        let prior = prior_of(it)?;
        let out = model.denoise_padded(&it.noisy, prior)?;
        psnr(&out, &it.clean)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionalAblationConfig {
    pub model: CondformerConfig,
    pub train: TrainConfig,
    pub train_images: usize,
    pub train_size: usize,
    pub eval_images: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for ConditionalAblationConfig {
    fn default() -> Self {
        Self {
            model: CondformerConfig::default(),
            train: TrainConfig::default(),
            train_images: 24,
            train_size: 128,
            eval_images: 16,
            eval_size: 128,
            seed: 0,
        }
    }
}

/// Models and data of a finished conditional ablation, for reuse.
pub struct ConditionalOutcome {
    pub report: ExperimentReport,
    /// (a) plain latent, (b) CondSA with zero prior, (c) CondSA with true prior.
    pub models: [Condformer; 3],
    pub eval_set: Vec<EvalItem>,
}

pub const ARM_LABELS: [&str; 3] = ["a_plain", "b_zero_prior", "c_true_prior"];

/// Trains the three arms on identical data streams and compares them on one
/// held-out mixed-level set. Derived keys: `psnr/{arm}`, `psnr/noisy`,
/// `gap_c_minus_b`, `gap_c_minus_a`, `gap_b_minus_a`, `final_loss/{arm}`.
pub fn run_conditional_ablation(cfg: &ConditionalAblationConfig) -> Result<ConditionalOutcome, HarnessError> {
    let start = Instant::now();
    let train_images = scenes::suite(cfg.train_images, cfg.train_size, cfg.train_size, name_seed(cfg.seed, "train-scenes"));
    let data = SyntheticPairs {
        images: train_images,
        crop: cfg.train.crop,
        noise: cfg.train.noise.clone(),
        seed: name_seed(cfg.seed, "train-pairs"),
    };
    let eval_set = make_eval_set(cfg.eval_images, cfg.eval_size, &cfg.train.noise, name_seed(cfg.seed, "eval"))?;
    let arms = [
        (LatentKind::Plain, PriorMode::True),
        (LatentKind::Condsa, PriorMode::Zero),
        (LatentKind::Condsa, PriorMode::True),
    ];
    let mut report = ExperimentReport::new("conditional_ablation", serde_json::to_value(cfg).unwrap_or_default());
    report.header.push("synthesis clipped to [0,1] for training and evaluation".into());
    let mut models = Vec::with_capacity(3);
    let mut scores = Vec::with_capacity(3);
    for (label, (latent, mode)) in ARM_LABELS.iter().zip(arms) {
        let mut model = Condformer::new(CondformerConfig { latent, ..cfg.model.clone() }, cfg.seed)?;
        let train = TrainConfig { prior_mode: mode, ..cfg.train.clone() };
        let losses = train_denoiser(&mut model, &data, &train)?;
        let tail = losses.len().min(100);
        if tail > 0 {
            let l = losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64;
            report.derived.insert(format!("final_loss/{label}"), l);
        }
        let s = evaluate(&model, &eval_set, |it| Ok(mode.apply(it.prior)))?;
        scores.push(s);
        models.push(model);
    }
    for (i, it) in eval_set.iter().enumerate() {
        let noisy = psnr(&it.noisy, &it.clean)?;
        report.records.push(Record::new(
            "eval",
            i,
            &[
                ("sigma_s", it.prior.sigma_s),
                ("sigma_r", it.prior.sigma_r),
                ("psnr_noisy", noisy),
                ("psnr_a_plain", scores[0][i]),
                ("psnr_b_zero_prior", scores[1][i]),
                ("psnr_c_true_prior", scores[2][i]),
            ],
        ));
    }
    report.aggregate();
    let mean = |k: &str| report.mean("eval", k).unwrap_or(f64::NAN);
    let (a, b, c) = (mean("psnr_a_plain"), mean("psnr_b_zero_prior"), mean("psnr_c_true_prior"));
    report.derived.insert("psnr/noisy".into(), mean("psnr_noisy"));
    for (l, v) in ARM_LABELS.iter().zip([a, b, c]) {
        report.derived.insert(format!("psnr/{l}"), v);
    }
    report.derived.insert("gap_c_minus_b".into(), c - b);
    report.derived.insert("gap_c_minus_a".into(), c - a);
    report.derived.insert("gap_b_minus_a".into(), b - a);
    report.wall_time_s = start.elapsed().as_secs_f64();
    let [ma, mb, mc]: [Condformer; 3] = models.try_into().map_err(|_| HarnessError::DataEmpty)?;
    Ok(ConditionalOutcome { report, models: [ma, mb, mc], eval_set })
}

/// Denoises every item twice, with the true prior and with the prior
/// estimated from the noisy image itself (all three channels pooled).
/// Derived: `psnr/true`, `psnr/estimated`, `gap_true_minus_estimated`.
pub fn run_blind_path(model: &Condformer, items: &[EvalItem], lonpe: &LonpeConfig) -> Result<ExperimentReport, HarnessError> {
    let start = Instant::now();
    let truth = evaluate(model, items, |it| Ok(it.prior))?;
    let ests = par_map(items, |_, it| estimate_pooled(&it.noisy.channels, lonpe))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let est_scores = par_map(items, |i, it| -> Result<f64, HarnessError> {
        let out = model.denoise_padded(&it.noisy, ests[i].prior)?;
        psnr(&out, &it.clean)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let mut report = ExperimentReport::new("blind_path", serde_json::json!({ "lonpe": lonpe }));
    for (i, it) in items.iter().enumerate() {
        report.records.push(Record::new(
            "eval",
            i,
            &[
                ("sigma_s", it.prior.sigma_s),
                ("sigma_r", it.prior.sigma_r),
                ("est_s", ests[i].prior.sigma_s),
                ("est_r", ests[i].prior.sigma_r),
                ("psnr_true", truth[i]),
                ("psnr_estimated", est_scores[i]),
            ],
        ));
    }
    report.aggregate();
    let t = report.mean("eval", "psnr_true").unwrap_or(f64::NAN);
    let e = report.mean("eval", "psnr_estimated").unwrap_or(f64::NAN);
    report.derived.insert("psnr/true".into(), t);
    report.derived.insert("psnr/estimated".into(), e);
    report.derived.insert("gap_true_minus_estimated".into(), t - e);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}
