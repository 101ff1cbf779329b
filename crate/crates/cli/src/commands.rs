use std::fs;
use std::path::{Path, PathBuf};

use noiseprior::condsa::{train_denoiser, Condformer, LatentKind, NoiseMix, PriorMode, SyntheticPairs};
use noiseprior::harness::{
    default_arms, default_sweep_priors, psnr, run_ablation_lonpe, run_conditional_ablation, run_estimation_sweep,
    scenes, ExperimentReport,
};
use noiseprior::image_io::{self, split_bayer, BayerPhase, ColorImage, ImagePlane, PlaneFormat, RawImage};
use noiseprior::lonpe::{estimate, estimate_pooled, LonpeConfig, PriorEstimate};
use noiseprior::noise_model::{sample_noise, sample_noise_color, NoiseKind, NoisePrior, NoiseSpec};
use noiseprior::prior_net::{synthetic_dataset, train_prior_net, PriorNet};
use noiseprior::tensor::init::name_seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::args::*;
use crate::config::FileConfig;
use crate::error::CliError;

struct Ctx {
    file: FileConfig,
    seed: u64,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let ctx = Ctx { file, seed };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Estimate(a) => estimate_cmd(&ctx, a),
        Command::TrainPriorNet(a) => train_prior_net_cmd(&ctx, a),
        Command::TrainDenoiser(a) => train_denoiser_cmd(&ctx, a),
        Command::Denoise(a) => denoise(&ctx, a),
        Command::Eval(a) => eval(a),
        Command::Ablation(a) => ablation(&ctx, a),
    }
}

fn emit(v: &Value) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn plane_format(f: Format) -> PlaneFormat {
    match f {
        Format::Float => PlaneFormat::Float,
        Format::Eight => PlaneFormat::Gray8,
        Format::Sixteen => PlaneFormat::Gray16,
    }
}

enum Loaded {
    Gray(ImagePlane),
    Color(ColorImage),
}

fn load(path: &Path) -> Result<Loaded, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(match image_io::decode(&bytes)? {
        RawImage::Gray { .. } | RawImage::FloatGray(_) => Loaded::Gray(image_io::read_plane(path)?),
        RawImage::Rgb { .. } | RawImage::FloatRgb(_) => Loaded::Color(image_io::read_color(path)?),
    })
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<(), CliError> {
    let prior = if a.random_prior {
        NoiseMix::default().draw(&mut ChaCha8Rng::seed_from_u64(name_seed(ctx.seed, "synth-prior")))
    } else if let Some((s, r)) = a.prior {
        NoisePrior::new(s, r)?
    } else {
        let r = a.sigma_r.or(a.sigma_r_255.map(|v| v / 255.0)).unwrap_or(0.0);
        NoisePrior::new(a.sigma_s.unwrap_or(0.0), r)?
    };
    let kind = match a.kind {
        Some(Kind::Gaussian) => NoiseKind::Gaussian,
        Some(Kind::PoissonGaussian) => NoiseKind::PoissonGaussian,
        Some(Kind::ExactPoissonGaussian) => NoiseKind::ExactPoissonGaussian,
        None => ctx.file.synth.kind,
    };
    let spec = NoiseSpec::new(kind, prior, ctx.seed).clipped(a.clip || ctx.file.synth.clip);
    let format = plane_format(a.format);
    match load(&a.input)? {
        Loaded::Gray(p) => image_io::save_plane(&sample_noise(&p, &spec)?, &a.output, format)?,
        Loaded::Color(c) => image_io::save_color(&sample_noise_color(&c, &spec)?, &a.output, format)?,
    }
    let sidecar = sidecar_path(&a.output);
    fs::write(&sidecar, serde_json::to_string_pretty(&spec)?)?;
    eprintln!("sigma_s {:.5}  sigma_r {:.5}  kind {kind:?}  clip {}", prior.sigma_s, prior.sigma_r, spec.clip);
    emit(&json!({ "output": a.output, "sidecar": sidecar, "spec": spec }))
}

fn lonpe_config(ctx: &Ctx, f: &LonpeFlags) -> LonpeConfig {
    let mut c = ctx.file.lonpe.clone();
    if let Some(v) = f.patch_size {
        c.patch_size = v;
    }
    if let Some(v) = f.select_ratio {
        c.select_ratio = v;
    }
    if let Some(v) = f.min_patches {
        c.min_patches = v;
    }
    if f.no_smoothness_filter {
        c.use_smoothness_filter = false;
    }
    c.seed = ctx.seed;
    c
}

fn print_estimate(label: &str, e: &PriorEstimate) {
    eprintln!(
        "{label:<6} sigma_s {:.5}  sigma_r {:.5}  patches {:>5}  rms {:.2e}  clamped {:?}",
        e.prior.sigma_s, e.prior.sigma_r, e.patches_used, e.residual_rms, e.clamped
    );
}

fn estimate_cmd(ctx: &Ctx, a: EstimateArgs) -> Result<(), CliError> {
    let cfg = lonpe_config(ctx, &a.lonpe);
    let loaded = match a.bit_depth {
        Some(b) => Loaded::Gray(image_io::load_plane(&a.input, b)?),
        None => load(&a.input)?,
    };
    match a.bayer {
        BayerMode::None => {
            let e = match &loaded {
                Loaded::Gray(p) => estimate(p, &cfg)?,
                Loaded::Color(c) => estimate_pooled(&c.channels, &cfg)?,
            };
            print_estimate("image", &e);
            emit(&serde_json::to_value(&e)?)
        }
        BayerMode::Split4 => {
            let Loaded::Gray(mosaic) = loaded else {
                return Err(CliError::Usage("--bayer split4 needs a single-channel mosaic".into()));
            };
            let phase: BayerPhase = a.phase.parse().map_err(CliError::Usage)?;
            let planes = split_bayer(&mosaic)?;
            let mut out = Vec::new();
            let (mut s, mut r) = (0.0, 0.0);
            for (label, plane) in phase.labels().iter().zip(&planes) {
                let e = estimate(plane, &cfg)?;
                print_estimate(label, &e);
                s += e.prior.sigma_s / 4.0;
                r += e.prior.sigma_r / 4.0;
                let mut v = serde_json::to_value(&e)?;
                v["channel"] = json!(label);
                out.push(v);
            }
            eprintln!("mean   sigma_s {s:.5}  sigma_r {r:.5}");
            emit(&json!({ "phase": phase, "planes": out, "mean": { "sigma_s": s, "sigma_r": r } }))
        }
    }
}

fn data_dims(ctx: &Ctx, d: &DataFlags) -> (usize, usize) {
    (d.images.unwrap_or(ctx.file.data.images), d.image_size.unwrap_or(ctx.file.data.image_size))
}

fn write_losses(path: Option<&Path>, losses: &[f64]) -> Result<(), CliError> {
    if let Some(p) = path {
        fs::write(p, serde_json::to_string(losses)?)?;
    }
    Ok(())
}

fn train_prior_net_cmd(ctx: &Ctx, a: TrainPriorNetArgs) -> Result<(), CliError> {
    let mut cfg = ctx.file.prior_train.clone();
    cfg.seed = ctx.seed;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr_max {
        cfg.lr_max = v;
    }
    let (n, size) = data_dims(ctx, &a.data);
    let clean = scenes::suite(n, size, size, name_seed(ctx.seed, "prior-net-scenes"));
    let mix = NoiseMix::default();
    let data = synthetic_dataset(&clean, (0.0, mix.sigma_s_max), (0.0, mix.sigma_r_max), mix.kind, ctx.seed)?;
    let mut net = PriorNet::new(ctx.file.prior_net.clone(), ctx.seed)?;
    let losses = train_prior_net(&mut net, &data, &cfg)?;
    net.save(&a.output)?;
    write_losses(a.losses.as_deref(), &losses)?;
    eprintln!("trained {} steps on {n} scenes, final loss {:?}", losses.len(), losses.last());
    emit(&json!({ "checkpoint": a.output, "steps": losses.len(), "final_loss": losses.last() }))
}

fn train_denoiser_cmd(ctx: &Ctx, a: TrainDenoiserArgs) -> Result<(), CliError> {
    let mut model_cfg = ctx.file.model.clone();
    if let Some(v) = a.base_channels {
        model_cfg.base_channels = v;
    }
    if let Some(v) = a.levels {
        model_cfg.levels = v;
    }
    if let Some(v) = a.latent_blocks {
        model_cfg.latent_blocks = v;
    }
    if let Some(v) = a.k {
        model_cfg.k = v;
    }
    if let Some(l) = a.latent {
        model_cfg.latent = match l {
            Latent::Condsa => LatentKind::Condsa,
            Latent::Plain => LatentKind::Plain,
        };
    }
    let mut cfg = ctx.file.train.clone();
    cfg.seed = ctx.seed;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.crop {
        cfg.crop = v;
    }
    if let Some(v) = a.lr_max {
        cfg.lr_max = v;
    }
    if let Some(m) = a.prior_mode {
        cfg.prior_mode = match m {
            PriorModeArg::True => PriorMode::True,
            PriorModeArg::Zero => PriorMode::Zero,
        };
    }
    let (n, size) = data_dims(ctx, &a.data);
    let data = SyntheticPairs {
        images: scenes::suite(n, size, size, name_seed(ctx.seed, "train-scenes")),
        crop: cfg.crop,
        noise: cfg.noise.clone(),
        seed: name_seed(ctx.seed, "train-pairs"),
    };
    let mut model = Condformer::new(model_cfg, ctx.seed)?;
    let losses = train_denoiser(&mut model, &data, &cfg)?;
    model.save(&a.output)?;
    write_losses(a.losses.as_deref(), &losses)?;
    eprintln!(
        "trained {} steps, {} parameters, final loss {:?}",
        losses.len(),
        model.params.num_elements(),
        losses.last()
    );
    emit(&json!({ "checkpoint": a.output, "steps": losses.len(), "final_loss": losses.last() }))
}

fn denoise(ctx: &Ctx, a: DenoiseArgs) -> Result<(), CliError> {
    let model = Condformer::load(&a.checkpoint)?;
    let noisy = image_io::read_color(&a.input)?;
    let (prior, source) = if let Some((s, r)) = a.prior {
        (NoisePrior::new(s, r)?, "given")
    } else if a.prior_from_estimate {
        (estimate_pooled(&noisy.channels, &lonpe_config(ctx, &a.lonpe))?.prior, "estimate")
    } else if let Some(p) = &a.prior_from_net {
        (PriorNet::load(p)?.predict(&noisy, ctx.seed)?, "net")
    } else {
        return Err(CliError::Usage("no prior source".into()));
    };
    let out = model.denoise_padded(&noisy, prior)?;
    image_io::save_color(&out, &a.output, plane_format(a.format))?;
    eprintln!("prior ({:.5}, {:.5}) from {source}", prior.sigma_s, prior.sigma_r);
    emit(&json!({ "output": a.output, "prior": prior, "source": source }))
}

/// PSNR as a JSON number, or the string `"inf"` for identical inputs.
fn db(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!("inf")
    }
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let pred = image_io::read_color(&a.pred)?;
    let gt = image_io::read_color(&a.gt)?;
    let p = psnr(&pred, &gt)?;
    eprintln!("PSNR {p:.4} dB");
    emit(&json!({ "psnr_db": db(p) }))
}

fn finish(report: &ExperimentReport, csv: Option<&Path>) -> Result<(), CliError> {
    eprint!("{}", report.table());
    if let Some(p) = csv {
        fs::write(p, report.to_csv())?;
    }
    println!("{}", report.to_json());
    Ok(())
}

fn ablation(ctx: &Ctx, a: AblationArgs) -> Result<(), CliError> {
    let report = match a.experiment {
        Experiment::Sweep | Experiment::Lonpe => {
            let n = a.data.images.unwrap_or(20);
            let size = a.data.image_size.unwrap_or(256);
            let images = scenes::gray_suite(n, size, size, name_seed(ctx.seed, "ablation-scenes"));
            if a.experiment == Experiment::Sweep {
                let cfg = LonpeConfig { seed: ctx.seed, ..ctx.file.lonpe.clone() };
                run_estimation_sweep(&images, &default_sweep_priors(), &cfg, NoiseKind::PoissonGaussian, ctx.seed)?
            } else {
                let truth = NoisePrior { sigma_s: 0.2, sigma_r: 0.01 };
                run_ablation_lonpe(&images, &default_arms(), truth, NoiseKind::ExactPoissonGaussian, ctx.seed)?
            }
        }
        Experiment::Conditional => {
            let mut cfg = ctx.file.ablation.clone();
            cfg.seed = ctx.seed;
            if let Some(v) = a.steps {
                cfg.train.steps = v;
            }
            if let Some(v) = a.data.images {
                cfg.train_images = v;
            }
            if let Some(v) = a.data.image_size {
                cfg.train_size = v;
            }
            run_conditional_ablation(&cfg)?.report
        }
    };
    finish(&report, a.csv.as_deref())
}
