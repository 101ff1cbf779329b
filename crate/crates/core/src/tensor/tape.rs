use std::collections::HashMap;

use super::kernels::{self as k, split_axis};
use super::{mismatch, ParamGrads, ParamId, ParamStore, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, Var),
    AddChannelBias(Var, Var),
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Conv1x1(Var, Var),
    Depthwise(Var, Var),
    Conv3x3 { x: Var, w: Var, stride: usize },
    Softmax(Var, usize),
    L2Normalize { x: Var, axis: usize, norms: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records one forward pass. Nodes are appended in evaluation order, which is
/// already topological, so backward is a reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<ParamId, Var>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.tracked {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

/// `(c, rest)` view of a tensor whose leading axis is channels.
fn channels(t: &Tensor) -> (usize, usize) {
    let c = t.shape().first().copied().unwrap_or(1);
    (c, t.numel() / c.max(1))
}

fn chw(t: &Tensor, what: &str) -> Result<(usize, usize, usize), TensorError> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(mismatch(format!("{what} expects [c,h,w], got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of the last backward pass with respect to a leaf created by
    /// [`Tape::variable`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked input whose gradient is kept after backward.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter of `store`. Binding the same parameter twice returns
    /// the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Param(id), p.trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var, TensorError> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, b]);
        self.push(Tensor { shape, data }, op, tracked)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        let tracked = self.tracked(&[a]);
        self.push(Tensor { shape, data }, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    /// `a / s` for a one-element `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).numel() != 1 {
            return Err(mismatch(format!("div_scalar by shape {:?}", self.shape(s))));
        }
        let d = self.value(s).data()[0];
        let v = self.map(a, Op::DivScalar(a, s), |x| x / d);
        self.nodes[v.0].tracked = self.tracked(&[a, s]);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (&[m, ka], &[kb, n]) = (self.shape(a), self.shape(b)) else {
            return Err(mismatch(format!(
                "matmul of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        };
        if ka != kb {
            return Err(mismatch(format!("matmul inner dims {ka} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        k::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, ka, n);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), tracked))
    }

    fn gather(&mut self, a: Var, shape: Vec<usize>, index: Vec<usize>) -> Var {
        let src = self.value(a).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let tracked = self.tracked(&[a]);
        self.push(Tensor { shape, data }, Op::Gather(a, index), tracked)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let &[m, n] = self.shape(a) else {
            return Err(mismatch(format!("transpose of {:?}", self.shape(a))));
        };
        let index = (0..m * n).map(|o| (o % m) * n + o / m).collect();
        Ok(self.gather(a, vec![n, m], index))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(t, Op::Reshape(a), tracked))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(mismatch(format!("narrow {start}+{len} on axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for j in start..start + len {
                index.extend((0..inner).map(|i| (o * n + j) * inner + i));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.gather(a, out_shape, index))
    }

    /// Replicates a `[k]` vector over an `h x w` grid, giving `[k,h,w]`.
    pub fn broadcast_spatial(&mut self, z: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        let &[kk] = self.shape(z) else {
            return Err(mismatch(format!("broadcast_spatial of {:?}", self.shape(z))));
        };
        let index = (0..kk * h * w).map(|o| o / (h * w)).collect();
        Ok(self.gather(z, vec![kk, h, w], index))
    }

    /// `[c,h,w] -> [4c,h/2,w/2]`; output channel `(dy*2+dx)*c + ch` holds
    /// pixel `(2i+dy, 2j+dx)` of input channel `ch`.
    pub fn space_to_depth(&mut self, a: Var) -> Result<Var, TensorError> {
        let (c, h, w) = chw(self.value(a), "space_to_depth")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(mismatch(format!("space_to_depth of odd extent {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut index = Vec::with_capacity(c * h * w);
        for oc in 0..4 * c {
            let (phase, ch) = (oc / c, oc % c);
            let (dy, dx) = (phase / 2, phase % 2);
            for i in 0..ho {
                for j in 0..wo {
                    index.push(ch * h * w + (2 * i + dy) * w + 2 * j + dx);
                }
            }
        }
        Ok(self.gather(a, vec![4 * c, ho, wo], index))
    }

    /// Inverse of [`Tape::space_to_depth`].
    pub fn depth_to_space(&mut self, a: Var) -> Result<Var, TensorError> {
        let (c4, h, w) = chw(self.value(a), "depth_to_space")?;
        if c4 % 4 != 0 {
            return Err(mismatch(format!("depth_to_space of {c4} channels")));
        }
        let c = c4 / 4;
        let (ho, wo) = (2 * h, 2 * w);
        let mut index = Vec::with_capacity(c4 * h * w);
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let phase = (y % 2) * 2 + x % 2;
                    index.push((phase * c + ch) * h * w + (y / 2) * w + x / 2);
                }
            }
        }
        Ok(self.gather(a, vec![c, ho, wo], index))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self
            .shape(*parts.first().ok_or_else(|| mismatch("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(mismatch(format!("concat axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch(format!("concat {s:?} with {first:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let n = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let tracked = self.tracked(parts);
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec(), axis), tracked))
    }

    /// Adds `b[c]` to every entry of channel `c` of `x[c,...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (c, rest) = channels(self.value(x));
        if self.shape(b) != [c] {
            return Err(mismatch(format!(
                "bias {:?} for {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i / rest])
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x, b]);
        Ok(self.push(Tensor { shape, data }, Op::AddChannelBias(x, b), tracked))
    }

    /// Channel mixing: `w[o,c]` applied to `x[c,...]`, giving `[o,...]`.
    pub fn conv1x1(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (c, rest) = channels(self.value(x));
        let &[o, wc] = self.shape(w) else {
            return Err(mismatch(format!("conv1x1 weight {:?}", self.shape(w))));
        };
        if wc != c {
            return Err(mismatch(format!("conv1x1 weight {o}x{wc} on {c} channels")));
        }
        let mut out = vec![0.0; o * rest];
        k::gemm_nn(self.value(w).data(), self.value(x).data(), &mut out, o, c, rest);
        let mut shape = self.shape(x).to_vec();
        shape[0] = o;
        let tracked = self.tracked(&[x, w]);
        Ok(self.push(Tensor { shape, data: out }, Op::Conv1x1(x, w), tracked))
    }

    /// Per-channel 3x3 filter `w[c,3,3]`, zero padding 1.
    pub fn depthwise_conv3x3(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (c, h, wd) = chw(self.value(x), "depthwise_conv3x3")?;
        if self.shape(w) != [c, 3, 3] {
            return Err(mismatch(format!("depthwise weight {:?} for {c} channels", self.shape(w))));
        }
        let mut out = vec![0.0; c * h * wd];
        k::depthwise3x3(self.value(x).data(), self.value(w).data(), &mut out, c, h, wd);
        let tracked = self.tracked(&[x, w]);
        Ok(self.push(Tensor { shape: vec![c, h, wd], data: out }, Op::Depthwise(x, w), tracked))
    }

    /// Dense 3x3 convolution `w[o,c,3,3]`, zero padding 1.
    pub fn conv3x3(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, TensorError> {
        let (c, h, wd) = chw(self.value(x), "conv3x3")?;
        let &[o, wc, 3, 3] = self.shape(w) else {
            return Err(mismatch(format!("conv3x3 weight {:?}", self.shape(w))));
        };
        if wc != c || stride == 0 {
            return Err(mismatch(format!("conv3x3 weight {o}x{wc} on {c} channels")));
        }
        let (ho, wo) = (k::conv_out(h, stride), k::conv_out(wd, stride));
        let cols = k::im2col(self.value(x).data(), c, h, wd, stride);
        let mut out = vec![0.0; o * ho * wo];
        k::gemm_nn(self.value(w).data(), &cols, &mut out, o, c * 9, ho * wo);
        let tracked = self.tracked(&[x, w]);
        Ok(self.push(
            Tensor { shape: vec![o, ho, wo], data: out },
            Op::Conv3x3 { x, w, stride },
            tracked,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(mismatch(format!("softmax axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax(x, axis), tracked))
    }

    /// `x / max(||x||, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        const EPS: f64 = 1e-12;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(mismatch(format!("l2_normalize axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let norm = (0..n).map(|j| src[at(j)].powi(2)).sum::<f64>().sqrt().max(EPS);
                norms[o * inner + i] = norm;
                for j in 0..n {
                    out[at(j)] = src[at(j)] / norm;
                }
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::L2Normalize { x, axis, norms },
            tracked,
        ))
    }

    /// Normalizes `x[c,...]` across channels at every position, then applies
    /// per-channel `gamma` and `beta`.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        const EPS: f64 = 1e-5;
        let (c, rest) = channels(self.value(x));
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch(format!("layer norm affine for {c} channels")));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rest];
        let mut out = vec![0.0; src.len()];
        for p in 0..rest {
            let mean = (0..c).map(|ch| src[ch * rest + p]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (src[ch * rest + p] - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd[p] = r;
            for ch in 0..c {
                let xh = (src[ch * rest + p] - mean) * r;
                xhat[ch * rest + p] = xh;
                out[ch * rest + p] = g[ch] * xh + b[ch];
            }
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            tracked,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), gelu_scalar)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid_scalar)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.numel().max(1) as f64;
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), tracked)
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        self.same_shape(pred, target, "l1_loss")?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let l = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len().max(1) as f64;
        let tracked = self.tracked(&[pred, target]);
        Ok(self.push(Tensor::scalar(l), Op::L1(pred, target), tracked))
    }

    /// Reverse sweep from `loss`, accumulating into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        let g = self.backward_collect(loss)?;
        store.accumulate(&g);
        Ok(())
    }

    /// Reverse sweep from `loss`; returns parameter gradients instead of
    /// writing them, so several tapes can run concurrently against one store.
    pub fn backward_collect(&mut self, loss: Var) -> Result<ParamGrads, TensorError> {
        let lv = &self.nodes[loss.0];
        if lv.value.numel() != 1 {
            return Err(TensorError::NotScalar(lv.value.shape().to_vec()));
        }
        if !lv.tracked {
            return Err(TensorError::UntrackedGraph);
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        let mut out = Vec::new();
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.tracked || grads[i].is_none() {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = grads[i].take().unwrap();
            let y = node.value.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Param(id) => out.push((*id, g)),
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(s) = slot(grads, nodes, v) {
                            s.iter_mut().zip(&g).for_each(|(s, g)| *s += g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(s) = slot(grads, nodes, *a) {
                        s.iter_mut().zip(&g).for_each(|(s, g)| *s += g);
                    }
                    if let Some(s) = slot(grads, nodes, *b) {
                        s.iter_mut().zip(&g).for_each(|(s, g)| *s -= g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(s) = slot(grads, nodes, *a) {
                        for j in 0..s.len() {
                            s[j] += g[j] * bv[j];
                        }
                    }
                    if let Some(s) = slot(grads, nodes, *b) {
                        for j in 0..s.len() {
                            s[j] += g[j] * av[j];
                        }
                    }
                }
                Op::Scale(a, f) => {
                    if let Some(s) = slot(grads, nodes, *a) {
                        s.iter_mut().zip(&g).for_each(|(s, g)| *s += f * g);
                    }
                }
                Op::DivScalar(a, d) => {
                    let dv = nodes[d.0].value.data()[0];
                    if let Some(s) = slot(grads, nodes, *a) {
                        s.iter_mut().zip(&g).for_each(|(s, g)| *s += g / dv);
                    }
                    if let Some(s) = slot(grads, nodes, *d) {
                        s[0] -= g.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / dv;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, kk) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let n = nodes[b.0].value.shape()[1];
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(s) = slot(grads, nodes, *a) {
                        k::gemm_nt(&g, bv, s, m, n, kk);
                    }
                    if let Some(s) = slot(grads, nodes, *b) {
                        k::gemm_tn(av, &g, s, kk, m, n);
                    }
                }
                Op::Gather(a, index) => {
                    if let Some(s) = slot(grads, nodes, *a) {
                        for (o, &src) in index.iter().enumerate() {
                            s[src] += g[o];
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(s) = slot(grads, nodes, *a) {
                        s.iter_mut().zip(&g).for_each(|(s, g)| *s += g);
                    }
                }
                Op::Concat(parts, axis) => {
                    let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p.0].value.shape()[*axis];
                        if let Some(s) = slot(grads, nodes, p) {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                                let dst = &mut s[o * n * inner..(o + 1) * n * inner];
                                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                            }
                        }
                        offset += n;
                    }
                }
                Op::AddChannelBias(x, b) => {
                    let (_, rest) = channels(&nodes[x.0].value);
                    if let Some(s) = slot(grads, nodes, *x) {
                        s.iter_mut().zip(&g).for_each(|(s, g)| *s += g);
                    }
                    if let Some(s) = slot(grads, nodes, *b) {
                        for (ch, sv) in s.iter_mut().enumerate() {
                            *sv += g[ch * rest..(ch + 1) * rest].iter().sum::<f64>();
                        }
                    }
                }
                Op::Conv1x1(x, w) => {
                    let (c, rest) = channels(&nodes[x.0].value);
                    let o = nodes[w.0].value.shape()[0];
                    let (xv, wv) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                    if let Some(s) = slot(grads, nodes, *w) {
                        k::gemm_nt(&g, xv, s, o, rest, c);
                    }
                    if let Some(s) = slot(grads, nodes, *x) {
                        k::gemm_tn(wv, &g, s, c, o, rest);
                    }
                }
                Op::Depthwise(x, w) => {
                    let [c, h, wd] = nodes[x.0].value.shape()[..] else { unreachable!() };
                    let (xv, wv) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                    if let Some(s) = slot(grads, nodes, *x) {
                        k::depthwise3x3_backward(xv, wv, &g, Some(s), None, c, h, wd);
                    }
                    if let Some(s) = slot(grads, nodes, *w) {
                        k::depthwise3x3_backward(xv, wv, &g, None, Some(s), c, h, wd);
                    }
                }
                Op::Conv3x3 { x, w, stride } => {
                    let [c, h, wd] = nodes[x.0].value.shape()[..] else { unreachable!() };
                    let o = nodes[w.0].value.shape()[0];
                    let hw_out = node.value.numel() / o;
                    let (xv, wv) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                    if nodes[w.0].tracked {
                        let cols = k::im2col(xv, c, h, wd, *stride);
                        let s = slot(grads, nodes, *w).unwrap();
                        k::gemm_nt(&g, &cols, s, o, hw_out, c * 9);
                    }
                    if let Some(s) = slot(grads, nodes, *x) {
                        let mut gcols = vec![0.0; c * 9 * hw_out];
                        k::gemm_tn(wv, &g, &mut gcols, c * 9, o, hw_out);
                        k::col2im(&gcols, s, c, h, wd, *stride);
                    }
                }
                Op::Softmax(x, axis) => {
                    if let Some(s) = slot(grads, nodes, *x) {
                        let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |j: usize| (o * n + j) * inner + i;
                                let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                                for j in 0..n {
                                    s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                                }
                            }
                        }
                    }
                }
                Op::L2Normalize { x, axis, norms } => {
                    if let Some(s) = slot(grads, nodes, *x) {
                        let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                        let xv = nodes[x.0].value.data();
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |j: usize| (o * n + j) * inner + i;
                                let norm = norms[o * inner + i];
                                let raw = (0..n).map(|j| xv[at(j)].powi(2)).sum::<f64>().sqrt();
                                if raw >= norm {
                                    let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                                    for j in 0..n {
                                        s[at(j)] += (g[at(j)] - y[at(j)] * dot) / norm;
                                    }
                                } else {
                                    for j in 0..n {
                                        s[at(j)] += g[at(j)] / norm;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (c, rest) = channels(&nodes[x.0].value);
                    let gv = nodes[gamma.0].value.data();
                    if let Some(s) = slot(grads, nodes, *beta) {
                        for (ch, sv) in s.iter_mut().enumerate() {
                            *sv += g[ch * rest..(ch + 1) * rest].iter().sum::<f64>();
                        }
                    }
                    if let Some(s) = slot(grads, nodes, *gamma) {
                        for (ch, sv) in s.iter_mut().enumerate() {
                            let r = ch * rest..(ch + 1) * rest;
                            *sv += g[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    if let Some(s) = slot(grads, nodes, *x) {
                        for p in 0..rest {
                            let (mut m1, mut m2) = (0.0, 0.0);
                            for ch in 0..c {
                                let d = g[ch * rest + p] * gv[ch];
                                m1 += d;
                                m2 += d * xhat[ch * rest + p];
                            }
                            m1 /= c as f64;
                            m2 /= c as f64;
                            for ch in 0..c {
                                let at = ch * rest + p;
                                let d = g[at] * gv[ch];
                                s[at] += rstd[p] * (d - m1 - xhat[at] * m2);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = nodes[x.0].value.data();
                    if let Some(s) = slot(grads, nodes, *x) {
                        for j in 0..s.len() {
                            s[j] += g[j] * gelu_grad(xv[j]);
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if let Some(s) = slot(grads, nodes, *x) {
                        for j in 0..s.len() {
                            s[j] += g[j] * y[j] * (1.0 - y[j]);
                        }
                    }
                }
                Op::Exp(x) => {
                    if let Some(s) = slot(grads, nodes, *x) {
                        for j in 0..s.len() {
                            s[j] += g[j] * y[j];
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(s) = slot(grads, nodes, *x) {
                        s.iter_mut().for_each(|s| *s += g[0]);
                    }
                }
                Op::Mean(x) => {
                    if let Some(s) = slot(grads, nodes, *x) {
                        let f = g[0] / s.len() as f64;
                        s.iter_mut().for_each(|s| *s += f);
                    }
                }
                Op::L1(p, t) => {
                    let (pv, tv) = (nodes[p.0].value.data(), nodes[t.0].value.data());
                    let f = g[0] / pv.len() as f64;
                    let sign = |j: usize| {
                        let d = pv[j] - tv[j];
                        if d > 0.0 {
                            f
                        } else if d < 0.0 {
                            -f
                        } else {
                            0.0
                        }
                    };
                    if let Some(s) = slot(grads, nodes, *p) {
                        for j in 0..s.len() {
                            s[j] += sign(j);
                        }
                    }
                    if let Some(s) = slot(grads, nodes, *t) {
                        for j in 0..s.len() {
                            s[j] -= sign(j);
                        }
                    }
                }
            }
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(ParamGrads(out))
    }
}
