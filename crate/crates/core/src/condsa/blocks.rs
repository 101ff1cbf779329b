//! Channel-attention transformer blocks, with and without the noise-prior
//! condition.
//!
//! Parameter names are `{prefix}.{local}`; see [`register_block`] for the
//! full list.

use crate::noise_model::NoisePrior;
use crate::tensor::{init, ParamStore, Tape, Tensor, Var};

use super::CondsaError;

/// Shape of one block's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub channels: usize,
    /// Embedding repeat count; `None` for an unconditional block.
    pub k: Option<usize>,
    pub expansion: usize,
    pub heads: usize,
}

/// How the repeated prior vector is turned into the block's embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Embedding {
    Identity,
    Learned,
}

fn p(tape: &mut Tape, store: &ParamStore, prefix: &str, local: &str) -> Result<Var, CondsaError> {
    Ok(tape.param_by_name(store, &format!("{prefix}.{local}"))?)
}

fn add_param(
    store: &mut ParamStore,
    prefix: &str,
    local: &str,
    t: Tensor,
) -> Result<(), CondsaError> {
    store.add(format!("{prefix}.{local}"), t)?;
    Ok(())
}

fn random(store: &mut ParamStore, prefix: &str, local: &str, shape: &[usize], fan_in: usize, seed: u64) -> Result<(), CondsaError> {
    let name = format!("{prefix}.{local}");
    let t = init::uniform(shape, fan_in, seed, &name);
    store.add(name, t)?;
    Ok(())
}

/// Registers every parameter of one block:
///
/// - `norm1.{gamma,beta}`, `norm2.{gamma,beta}`: `[c]`
/// - `{q,k,v}.pw`: `[c,c]`, `{q,k,v}.dw`: `[c,3,3]`
/// - `log_alpha`: `[heads]`, `proj`: `[c,c]`
/// - `ffn.expand`: `[e*c,c]`, `ffn.project`: `[c,e*c]`
/// - conditional only: `lfm_{q,k}.pw`: `[c,c+2k]`, `lfm_{q,k}.dw`: `[c,3,3]`,
///   `embed.fc{1,2}.w`: `[2k,2k]`, `embed.fc{1,2}.b`: `[2k]`
pub fn register_block(store: &mut ParamStore, prefix: &str, shape: BlockShape, seed: u64) -> Result<(), CondsaError> {
    let BlockShape { channels: c, k, expansion: e, heads } = shape;
    if c == 0 || heads == 0 || c % heads != 0 {
        return Err(CondsaError::Config(format!("{c} channels with {heads} heads")));
    }
    for n in ["norm1", "norm2"] {
        add_param(store, prefix, &format!("{n}.gamma"), Tensor::filled([c], 1.0))?;
        add_param(store, prefix, &format!("{n}.beta"), Tensor::zeros([c]))?;
    }
    for n in ["q", "k", "v"] {
        random(store, prefix, &format!("{n}.pw"), &[c, c], c, seed)?;
        random(store, prefix, &format!("{n}.dw"), &[c, 3, 3], 9, seed)?;
    }
    add_param(store, prefix, "log_alpha", Tensor::zeros([heads]))?;
    random(store, prefix, "proj", &[c, c], c, seed)?;
    random(store, prefix, "ffn.expand", &[e * c, c], c, seed)?;
    random(store, prefix, "ffn.project", &[c, e * c], e * c, seed)?;
    if let Some(k) = k {
        if k == 0 {
            return Err(CondsaError::Config("embedding repeat k must be >= 1".into()));
        }
        for n in ["lfm_q", "lfm_k"] {
            random(store, prefix, &format!("{n}.pw"), &[c, c + 2 * k], c + 2 * k, seed)?;
            random(store, prefix, &format!("{n}.dw"), &[c, 3, 3], 9, seed)?;
        }
        for n in ["embed.fc1", "embed.fc2"] {
            random(store, prefix, &format!("{n}.w"), &[2 * k, 2 * k], 2 * k, seed)?;
            add_param(store, prefix, &format!("{n}.b"), Tensor::zeros([2 * k]))?;
        }
    }
    Ok(())
}

/// `(sigma_s x k, sigma_r x k)`
pub fn embed_base(prior: NoisePrior, k: usize) -> Tensor {
    let mut v = vec![prior.sigma_s; k];
    v.extend(std::iter::repeat_n(prior.sigma_r, k));
    Tensor::from_vec(v)
}

fn fully_connected(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var, CondsaError> {
    let n = tape.shape(x)[0];
    let w = p(tape, store, prefix, "w")?;
    let b = p(tape, store, prefix, "b")?;
    let col = tape.reshape(x, &[n, 1])?;
    let y = tape.conv1x1(col, w)?;
    let y = tape.add_channel_bias(y, b)?;
    let m = tape.shape(y)[0];
    Ok(tape.reshape(y, &[m])?)
}

/// The block's embedding vector `z`, length `2k`.
pub fn embed_prior(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    prior: NoisePrior,
    k: usize,
    mode: Embedding,
) -> Result<Var, CondsaError> {
    let base = tape.constant(embed_base(prior, k));
    embed_vector(tape, store, prefix, base, mode)
}

/// [`embed_prior`] from an already-built base vector (which may be tracked).
pub fn embed_vector(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    base: Var,
    mode: Embedding,
) -> Result<Var, CondsaError> {
    match mode {
        Embedding::Identity => Ok(base),
        Embedding::Learned => {
            let h = fully_connected(tape, store, &format!("{prefix}.embed.fc1"), base)?;
            let h = tape.gelu(h);
            fully_connected(tape, store, &format!("{prefix}.embed.fc2"), h)
        }
    }
}

/// Linear fusion: concat `z` broadcast over the grid onto `t`, then 1x1 conv
/// back to `c` channels and a depthwise 3x3.
pub fn lfm(tape: &mut Tape, store: &ParamStore, prefix: &str, t: Var, z: Var) -> Result<Var, CondsaError> {
    let &[_, h, w] = tape.shape(t) else {
        return Err(CondsaError::Shape(format!("lfm input {:?}", tape.shape(t))));
    };
    let zb = tape.broadcast_spatial(z, h, w)?;
    let cat = tape.concat(&[t, zb], 0)?;
    let pw = p(tape, store, prefix, "pw")?;
    let dw = p(tape, store, prefix, "dw")?;
    let y = tape.conv1x1(cat, pw)?;
    Ok(tape.depthwise_conv3x3(y, dw)?)
}

/// `softmax_rows(Q K^T / alpha) V` for `Q, K, V: [c, n]` and one-element
/// `alpha`. Returns the output and the `c x c` attention matrix.
pub fn channel_attention(tape: &mut Tape, q: Var, k: Var, v: Var, alpha: Var) -> Result<(Var, Var), CondsaError> {
    if tape.shape(q) != tape.shape(k) || tape.shape(q) != tape.shape(v) || tape.shape(q).len() != 2 {
        return Err(CondsaError::Shape(format!(
            "attention on {:?}, {:?}, {:?}",
            tape.shape(q),
            tape.shape(k),
            tape.shape(v)
        )));
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.div_scalar(logits, alpha)?;
    let attn = tape.softmax(logits, 1)?;
    let out = tape.matmul(attn, v)?;
    Ok((out, attn))
}

/// Multi-head attention core on `[c,h,w]` maps: per head, L2-normalize the
/// rows of Q and K and apply [`channel_attention`] with
/// `alpha = exp(log_alpha[head])`.
pub fn attention_core(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var, CondsaError> {
    let shape = tape.shape(q).to_vec();
    let (c, n) = (shape[0], shape[1..].iter().product::<usize>());
    let log_alpha = p(tape, store, prefix, "log_alpha")?;
    let [q, k, v] = [q, k, v].map(|t| tape.reshape(t, &[c, n]));
    let (q, k, v) = (q?, k?, v?);
    let ch = c / heads;
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = tape.narrow(q, 0, hd * ch, ch)?;
        let kh = tape.narrow(k, 0, hd * ch, ch)?;
        let vh = if heads == 1 { v } else { tape.narrow(v, 0, hd * ch, ch)? };
        let qh = tape.l2_normalize(qh, 1)?;
        let kh = tape.l2_normalize(kh, 1)?;
        let la = if heads == 1 { log_alpha } else { tape.narrow(log_alpha, 0, hd, 1)? };
        let alpha = tape.exp(la);
        outs.push(channel_attention(tape, qh, kh, vh, alpha)?.0);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat(&outs, 0)? };
    Ok(tape.reshape(out, &shape)?)
}

fn pw_dw(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var, CondsaError> {
    let pw = p(tape, store, prefix, "pw")?;
    let dw = p(tape, store, prefix, "dw")?;
    let y = tape.conv1x1(x, pw)?;
    Ok(tape.depthwise_conv3x3(y, dw)?)
}

fn layer_norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var, CondsaError> {
    let g = p(tape, store, prefix, "gamma")?;
    let b = p(tape, store, prefix, "beta")?;
    Ok(tape.layer_norm_channels(x, g, b)?)
}

/// One pre-norm block on `x: [c,h,w]`. With `z` present, Q and K pass through
/// their LFMs before attention (the CondSA form).
pub fn transformer_block(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    z: Option<Var>,
    heads: usize,
) -> Result<Var, CondsaError> {
    let xn = layer_norm(tape, store, &format!("{prefix}.norm1"), x)?;
    let mut q = pw_dw(tape, store, &format!("{prefix}.q"), xn)?;
    let mut k = pw_dw(tape, store, &format!("{prefix}.k"), xn)?;
    let v = pw_dw(tape, store, &format!("{prefix}.v"), xn)?;
    if let Some(z) = z {
        q = lfm(tape, store, &format!("{prefix}.lfm_q"), q, z)?;
        k = lfm(tape, store, &format!("{prefix}.lfm_k"), k, z)?;
    }
    let att = attention_core(tape, store, prefix, q, k, v, heads)?;
    let proj = p(tape, store, prefix, "proj")?;
    let att = tape.conv1x1(att, proj)?;
    let y = tape.add(att, x)?;
    let yn = layer_norm(tape, store, &format!("{prefix}.norm2"), y)?;
    let expand = p(tape, store, prefix, "ffn.expand")?;
    let project = p(tape, store, prefix, "ffn.project")?;
    let f = tape.conv1x1(yn, expand)?;
    let f = tape.gelu(f);
    let f = tape.conv1x1(f, project)?;
    Ok(tape.add(y, f)?)
}

/// CondSA block: embeds `prior` with the block's own FC layers and runs
/// [`transformer_block`] with the resulting `z`.
pub fn condsa_block(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    prior: NoisePrior,
    k: usize,
    heads: usize,
) -> Result<Var, CondsaError> {
    let z = embed_prior(tape, store, prefix, prior, k, Embedding::Learned)?;
    transformer_block(tape, store, prefix, x, Some(z), heads)
}
