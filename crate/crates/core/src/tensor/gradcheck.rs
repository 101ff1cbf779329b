//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Tensor, TensorError, Var};

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    /// Input (or parameter) index and flat element index.
    pub slot: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

fn probes(sizes: &[usize], count: usize, seed: u64) -> Vec<(usize, usize)> {
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count.min(total.max(1) * 4))
        .map(|_| {
            let mut flat = rng.random_range(0..total);
            let mut slot = 0;
            while flat >= sizes[slot] {
                flat -= sizes[slot];
                slot += 1;
            }
            (slot, flat)
        })
        .collect()
}

/// Checks the gradient of the scalar `f(inputs)` with respect to every input
/// tensor at `count` random probes.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, count: usize, h: f64, seed: u64) -> Result<Vec<Probe>, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |ins: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward_collect(loss)?;
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let mut out = Vec::new();
    for (slot, index) in probes(&sizes, count, seed) {
        let analytic = tape.grad(vars[slot]).map_or(0.0, |g| g[index]);
        let mut ins = inputs.to_vec();
        let x0 = ins[slot].data()[index];
        ins[slot].data_mut()[index] = x0 + h;
        let up = eval(&ins)?;
        ins[slot].data_mut()[index] = x0 - h;
        let down = eval(&ins)?;
        let numeric = (up - down) / (2.0 * h);
        out.push(Probe {
            slot,
            index,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    Ok(out)
}

/// Checks parameter gradients of the scalar `f(store)`.
pub fn check_params<F>(store: &ParamStore, f: F, count: usize, h: f64, seed: u64) -> Result<Vec<Probe>, TensorError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, TensorError>,
{
    let eval = |s: &ParamStore| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, s)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    let grads = tape.backward_collect(loss)?;
    work.accumulate(&grads);
    let sizes: Vec<usize> = work.iter().map(|p| p.tensor.numel()).collect();
    let analytic_all: Vec<Vec<f64>> = work.iter().map(|p| p.grad.clone()).collect();
    let mut out = Vec::new();
    for (slot, index) in probes(&sizes, count, seed) {
        let id = super::ParamId(slot);
        let x0 = work.get(id).tensor.data()[index];
        work.get_mut(id).tensor.data_mut()[index] = x0 + h;
        let up = eval(&work)?;
        work.get_mut(id).tensor.data_mut()[index] = x0 - h;
        let down = eval(&work)?;
        work.get_mut(id).tensor.data_mut()[index] = x0;
        let numeric = (up - down) / (2.0 * h);
        let analytic = analytic_all[slot][index];
        out.push(Probe {
            slot,
            index,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    Ok(out)
}

pub fn worst(probes: &[Probe]) -> Option<Probe> {
    probes
        .iter()
        .copied()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
}

/// Deterministic uniform tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Like [`check_params`] but probes `per_param` random elements of every
/// parameter, so no parameter goes unchecked.
pub fn check_each_param<F>(store: &ParamStore, f: F, per_param: usize, h: f64, seed: u64) -> Result<Vec<Probe>, TensorError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, TensorError>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    let grads = tape.backward_collect(loss)?;
    work.accumulate(&grads);
    let analytic_all: Vec<Vec<f64>> = work.iter().map(|p| p.grad.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for slot in 0..work.len() {
        let id = super::ParamId(slot);
        let n = work.get(id).tensor.numel();
        for _ in 0..per_param.min(n) {
            let index = rng.random_range(0..n);
            let x0 = work.get(id).tensor.data()[index];
            let mut eval_at = |x: f64| -> Result<f64, TensorError> {
                work.get_mut(id).tensor.data_mut()[index] = x;
                let mut tape = Tape::new();
                let loss = f(&mut tape, &work)?;
                Ok(tape.value(loss).data()[0])
            };
            let up = eval_at(x0 + h)?;
            let down = eval_at(x0 - h)?;
            work.get_mut(id).tensor.data_mut()[index] = x0;
            let numeric = (up - down) / (2.0 * h);
            let analytic = analytic_all[slot][index];
            out.push(Probe {
                slot,
                index,
                analytic,
                numeric,
                rel_error: rel_error(analytic, numeric),
            });
        }
    }
    Ok(out)
}
