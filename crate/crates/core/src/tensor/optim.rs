use serde::{Deserialize, Serialize};

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter from the
/// gradients currently held in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig, lr: f64) {
    if state.m.len() != store.len() {
        *state = AdamState::new(store);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = p.grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            if cfg.weight_decay > 0.0 {
                *w -= lr * cfg.weight_decay * *w;
            }
            *w -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
        }
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at step `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let t = (step.min(total) as f64) / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        s.iter_mut().next().unwrap().grad[0] = 1.0;
        adam_step(&mut s, &mut st, &AdamConfig::default(), 0.1);
        let x = s.iter().next().unwrap().tensor.data()[0];
        assert!((x - 0.9).abs() < 1e-6, "{x}");
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new(&s);
        for _ in 0..100 {
            adam_step(&mut s, &mut st, &AdamConfig::default(), 0.1);
        }
        assert_eq!(s.iter().next().unwrap().tensor.data()[0], 0.7);
    }

    #[test]
    fn quadratic_bowl() {
        let mut s = scalar_store(2.0);
        let mut st = AdamState::new(&s);
        let mut steps = 0;
        for i in 0..500 {
            let p = s.iter_mut().next().unwrap();
            let x = p.tensor.data()[0];
            if x.abs() < 1e-3 {
                break;
            }
            p.grad[0] = 2.0 * x;
            adam_step(&mut s, &mut st, &AdamConfig::default(), cosine_lr(i, 500, 0.1, 1e-4));
            steps = i + 1;
        }
        let x = s.iter().next().unwrap().tensor.data()[0];
        assert!(x.abs() < 1e-3, "x = {x} after {steps} steps");
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-6), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1.0, 0.0) - 0.5).abs() < 1e-12);
    }
}
