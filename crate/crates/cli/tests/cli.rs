use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use noiseprior::condsa::{Condformer, CondformerConfig};
use noiseprior::harness::scenes;
use noiseprior::image_io::{self, ImagePlane, PlaneFormat};
use serde_json::Value;
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noiseprior")).args(args).output().expect("spawn noiseprior")
}

fn ok_json(args: &[&str]) -> Value {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gray_scene(dir: &TempDir, size: usize) -> PathBuf {
    let path = dir.path().join("clean.pfm");
    let img = scenes::gray_suite(1, size, size, 3).remove(0);
    image_io::save_plane(&img, &path, PlaneFormat::Float).unwrap();
    path
}

fn color_scene(dir: &TempDir, size: usize) -> PathBuf {
    let path = dir.path().join("clean_rgb.pfm");
    let img = scenes::suite(1, size, size, 5).remove(0);
    image_io::save_color(&img, &path, PlaneFormat::Float).unwrap();
    path
}

#[test]
fn zero_prior_synth_copies_float_input() {
    let dir = TempDir::new().unwrap();
    let clean = gray_scene(&dir, 32);
    let out = dir.path().join("noisy.pfm");
    ok_json(&["synth", "-i", p(&clean), "-o", p(&out), "--prior", "0,0"]);
    assert_eq!(std::fs::read(&clean).unwrap(), std::fs::read(&out).unwrap());
}

#[test]
fn synth_is_deterministic_and_writes_sidecar() {
    let dir = TempDir::new().unwrap();
    let clean = color_scene(&dir, 32);
    let a = dir.path().join("a.pfm");
    let b = dir.path().join("b.pfm");
    let c = dir.path().join("c.pfm");
    for (out, seed) in [(&a, "9"), (&b, "9"), (&c, "10")] {
        ok_json(&["synth", "-i", p(&clean), "-o", p(out), "--random-prior", "--seed", seed]);
    }
    let read = |x: &PathBuf| std::fs::read(x).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let spec: Value = serde_json::from_slice(&read(&dir.path().join("a.pfm.json"))).unwrap();
    assert_eq!(spec["seed"], 9);
    assert!(spec["sigma_s"].as_f64().unwrap() <= 0.3);
}

#[test]
fn constant_image_is_a_numeric_failure() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("flat.pfm");
    image_io::save_plane(&ImagePlane::from_fn(64, 64, |_, _| 0.4), &path, PlaneFormat::Float).unwrap();
    let out = bin(&["estimate", "-i", p(&path)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn estimate_recovers_synthetic_prior() {
    let dir = TempDir::new().unwrap();
    let clean = gray_scene(&dir, 512);
    let noisy = dir.path().join("noisy.pfm");
    ok_json(&["synth", "-i", p(&clean), "-o", p(&noisy), "--prior", "0.05,0.02", "--seed", "1"]);
    let e = ok_json(&["estimate", "-i", p(&noisy)]);
    let s = e["sigma_s"].as_f64().unwrap();
    let r = e["sigma_r"].as_f64().unwrap();
    assert!((s - 0.05).abs() <= 0.02 && (r - 0.02).abs() <= 0.02, "estimated ({s}, {r})");
}

#[test]
fn split4_reports_each_phase() {
    let dir = TempDir::new().unwrap();
    let clean = gray_scene(&dir, 256);
    let noisy = dir.path().join("mosaic.pgm");
    ok_json(&["synth", "-i", p(&clean), "-o", p(&noisy), "--prior", "0.05,0.02", "--clip", "--format", "16"]);
    let e = ok_json(&["estimate", "-i", p(&noisy), "--bayer", "split4", "--phase", "grbg"]);
    let planes = e["planes"].as_array().unwrap();
    assert_eq!(planes.len(), 4);
    let labels: Vec<&str> = planes.iter().map(|v| v["channel"].as_str().unwrap()).collect();
    assert_eq!(labels, ["Gr", "R", "B", "Gb"]);
    assert!(e["mean"]["sigma_s"].as_f64().unwrap() > 0.0);
}

#[test]
fn identical_images_have_infinite_psnr() {
    let dir = TempDir::new().unwrap();
    let clean = color_scene(&dir, 16);
    let v = ok_json(&["eval", "--pred", p(&clean), "--gt", p(&clean)]);
    assert_eq!(v["psnr_db"], "inf");
}

#[test]
fn zero_step_training_saves_the_initialisation() {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    ok_json(&["train-denoiser", "-o", p(&ckpt), "--steps", "0", "--seed", "21", "--images", "1", "--image-size", "32"]);
    let loaded = Condformer::load(&ckpt).unwrap();
    let fresh = Condformer::new(CondformerConfig::default(), 21).unwrap();
    assert_eq!(loaded.params.len(), fresh.params.len());
    for (a, b) in loaded.params.iter().zip(fresh.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor, b.tensor, "{}", a.name);
    }
}

#[test]
fn bad_invocations_exit_with_usage_code() {
    assert_eq!(bin(&["estimate", "--bogus"]).status.code(), Some(2));
    assert_eq!(bin(&["synth", "-i", "x", "-o", "y", "--prior", "0.1"]).status.code(), Some(2));
    assert_eq!(bin(&["eval", "--pred", "/nonexistent/a", "--gt", "/nonexistent/b"]).status.code(), Some(3));
}

#[test]
fn denoise_with_estimated_prior() {
    let dir = TempDir::new().unwrap();
    let clean = color_scene(&dir, 64);
    let noisy = dir.path().join("noisy.pfm");
    let ckpt = dir.path().join("model.ckpt");
    let out = dir.path().join("out.pfm");
    ok_json(&["synth", "-i", p(&clean), "-o", p(&noisy), "--prior", "0.1,0.04"]);
    ok_json(&["train-denoiser", "-o", p(&ckpt), "--steps", "2", "--batch-size", "1", "--crop", "16", "--images", "1", "--image-size", "32"]);
    let v = ok_json(&[
        "denoise", "--checkpoint", p(&ckpt), "-i", p(&noisy), "-o", p(&out),
        "--prior-from-estimate", "--patch-size", "8",
    ]);
    assert_eq!(v["source"], "estimate");
    let img = image_io::read_color(&out).unwrap();
    assert_eq!((img.width, img.height), (64, 64));
}
