//! Permutation-invariant attention blocks: MAB, SAB, ISAB, PMA, and the
//! encoder/decoder stacks built from them.
//!
//! Every block is a pure function of `(inputs, params)` recorded on a
//! [`Tape`]; parameters live in a [`ParamStore`] under a caller-chosen name
//! prefix, so one store can hold the encoder and a classifier head at once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Init, ParamStore, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SetTransformerConfig {
    /// Dimension of incoming sequence embeddings.
    pub input_dim: usize,
    /// Width of the attention blocks.
    pub model_dim: usize,
    pub heads: usize,
    pub inducing_points: usize,
    /// Learnable seed vectors in the pooling block.
    pub pma_seeds: usize,
    pub encoder_blocks: usize,
    pub ln_eps: f64,
}

impl Default for SetTransformerConfig {
    fn default() -> Self {
        SetTransformerConfig {
            input_dim: 768,
            model_dim: 256,
            heads: 4,
            inducing_points: 16,
            pma_seeds: 1,
            encoder_blocks: 2,
            ln_eps: 1e-5,
        }
    }
}

impl SetTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.input_dim == 0 {
            return Err(Error::Config("model_dim and input_dim must be positive".into()));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.inducing_points < 1 {
            return Err(Error::Config("inducing_points must be >= 1".into()));
        }
        if self.pma_seeds < 1 {
            return Err(Error::Config("pma_seeds must be >= 1".into()));
        }
        if self.encoder_blocks < 1 {
            return Err(Error::Config("encoder_blocks must be >= 1".into()));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be > 0".into()));
        }
        Ok(())
    }

    /// Length of the flattened pooled vector.
    pub fn pooled_dim(&self) -> usize {
        self.pma_seeds * self.model_dim
    }
}

/// Per-element encoder outputs for one set: an N×d matrix whose row i is o_i.
#[derive(Debug, Clone)]
pub struct EncodedSet<R: Real>(pub Tensor<R>);

impl<R: Real> EncodedSet<R> {
    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Tensor<R> {
        &self.0
    }
}

fn linear<R: Real>(
    tape: &mut Tape<R>,
    store: &mut ParamStore<R>,
    prefix: &str,
    x: Var,
    in_dim: usize,
    out_dim: usize,
) -> Result<Var> {
    let w = tape.param(
        store,
        &format!("{prefix}.w"),
        &[in_dim, out_dim],
        Init::UniformFanIn(in_dim),
    )?;
    let b = tape.param(store, &format!("{prefix}.b"), &[out_dim], Init::Zeros)?;
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

fn layer_norm<R: Real>(
    tape: &mut Tape<R>,
    store: &mut ParamStore<R>,
    prefix: &str,
    x: Var,
    dim: usize,
    eps: f64,
) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.g"), &[dim], Init::Ones)?;
    let b = tape.param(store, &format!("{prefix}.b"), &[dim], Init::Zeros)?;
    tape.layer_norm(x, g, b, eps)
}

/// Row-wise feed-forward with one hidden layer of width d and ReLU.
fn feed_forward<R: Real>(
    tape: &mut Tape<R>,
    store: &mut ParamStore<R>,
    prefix: &str,
    x: Var,
    dim: usize,
) -> Result<Var> {
    let h = linear(tape, store, &format!("{prefix}.l1"), x, dim, dim)?;
    let h = tape.relu(h)?;
    linear(tape, store, &format!("{prefix}.l2"), h, dim, dim)
}

/// Multi-head attention of queries `x` against keys/values `y`, with an
/// output projection back to model width.
fn multihead<R: Real>(
    tape: &mut Tape<R>,
    store: &mut ParamStore<R>,
    prefix: &str,
    x: Var,
    y: Var,
    cfg: &SetTransformerConfig,
) -> Result<Var> {
    let d = cfg.model_dim;
    let dh = d / cfg.heads;
    let wq = tape.param(store, &format!("{prefix}.wq"), &[d, d], Init::UniformFanIn(d))?;
    let wk = tape.param(store, &format!("{prefix}.wk"), &[d, d], Init::UniformFanIn(d))?;
    let wv = tape.param(store, &format!("{prefix}.wv"), &[d, d], Init::UniformFanIn(d))?;
    let wo = tape.param(store, &format!("{prefix}.wo"), &[d, d], Init::UniformFanIn(d))?;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(y, wk)?;
    let v = tape.matmul(y, wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.col_slice(q, h * dh, dh)?;
        let kh = tape.col_slice(k, h * dh, dh)?;
        let vh = tape.col_slice(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let concat = tape.col_concat(&heads)?;
    tape.matmul(concat, wo)
}

/// Multihead attention block:
/// `H = LN(x + Multihead(x, y, y))`, `out = LN(H + FeedForward(H))`.
///
/// Permutation-equivariant in the rows of `x`, invariant to row order of `y`.
pub fn mab<R: Real>(
    tape: &mut Tape<R>,
    store: &mut ParamStore<R>,
    prefix: &str,
    x: Var,
    y: Var,
    cfg: &SetTransformerConfig,
) -> Result<Var> {
    let d = cfg.model_dim;
    if tape.value(x).cols() != d || tape.value(y).cols() != d {
        return Err(Error::Dimension(format!(
            "mab expects {d} columns, got {} and {}",
            tape.value(x).cols(),
            tape.value(y).cols()
        )));
    }
    let attn = multihead(tape, store, &format!("{prefix}.attn"), x, y, cfg)?;
    let res = tape.add(x, attn)?;
    let h = layer_norm(tape, store, &format!("{prefix}.ln1"), res, d, cfg.ln_eps)?;
    let ff = feed_forward(tape, store, &format!("{prefix}.ff"), h, d)?;
    let res2 = tape.add(h, ff)?;
    layer_norm(tape, store, &format!("{prefix}.ln2"), res2, d, cfg.ln_eps)
}

/// Set attention block: `sab(X) = mab(X, X)`.
pub fn sab<R: Real>(
    tape: &mut Tape<R>,
    store: &mut ParamStore<R>,
    prefix: &str,
    x: Var,
    cfg: &SetTransformerConfig,
) -> Result<Var> {
    mab(tape, store, prefix, x, x, cfg)
}

/// Induced set attention block routed through `inducing_points` learned rows:
/// `isab(X) = mab(X, mab(I, X))`. Attention matrices are n×m and m×n.
pub fn isab<R: Real>(
    tape: &mut Tape<R>,
    store: &mut ParamStore<R>,
    prefix: &str,
    x: Var,
    cfg: &SetTransformerConfig,
) -> Result<Var> {
    let d = cfg.model_dim;
    let m = cfg.inducing_points;
    let inducing = tape.param(
        store,
        &format!("{prefix}.inducing"),
        &[m, d],
        Init::UniformFanIn(d),
    )?;
    let summary = mab(tape, store, &format!("{prefix}.inner"), inducing, x, cfg)?;
    mab(tape, store, &format!("{prefix}.outer"), x, summary, cfg)
}

/// Pooling by multihead attention from `pma_seeds` learned seed rows:
/// `pma(Z) = mab(S, FeedForward(Z))`. Output is k×d, invariant to row order
/// of `Z`.
pub fn pma<R: Real>(
    tape: &mut Tape<R>,
    store: &mut ParamStore<R>,
    prefix: &str,
    z: Var,
    cfg: &SetTransformerConfig,
) -> Result<Var> {
    let d = cfg.model_dim;
    let k = cfg.pma_seeds;
    let seeds = tape.param(
        store,
        &format!("{prefix}.seeds"),
        &[k, d],
        Init::UniformFanIn(d),
    )?;
    let zf = feed_forward(tape, store, &format!("{prefix}.ff"), z, d)?;
    mab(tape, store, &format!("{prefix}.mab"), seeds, zf, cfg)
}

/// Encoder stack: linear input map `input_dim -> model_dim`, then
/// `encoder_blocks` ISAB blocks. Returns the n×d matrix of per-element
/// outputs.
pub fn encode_set_on<R: Real>(
    tape: &mut Tape<R>,
    store: &mut ParamStore<R>,
    prefix: &str,
    x: Var,
    cfg: &SetTransformerConfig,
) -> Result<Var> {
    cfg.validate()?;
    let t = tape.value(x);
    if t.rows() < 1 {
        return Err(Error::EmptyInput("encode_set of an empty set".into()));
    }
    if t.cols() != cfg.input_dim {
        return Err(Error::Dimension(format!(
            "encode_set expects {} columns, got {}",
            cfg.input_dim,
            t.cols()
        )));
    }
    let mut h = linear(
        tape,
        store,
        &format!("{prefix}.in_proj"),
        x,
        cfg.input_dim,
        cfg.model_dim,
    )?;
    for b in 0..cfg.encoder_blocks {
        h = isab(tape, store, &format!("{prefix}.enc{b}"), h, cfg)?;
    }
    Ok(h)
}

/// Decoder: PMA over the encoded rows, one SAB over the k pooled rows, then
/// flatten to a single `1×(k·d)` row. Invariant to the row order of `e`.
pub fn pool_set_on<R: Real>(
    tape: &mut Tape<R>,
    store: &mut ParamStore<R>,
    prefix: &str,
    e: Var,
    cfg: &SetTransformerConfig,
) -> Result<Var> {
    if tape.value(e).rows() < 1 {
        return Err(Error::EmptyInput("pool_set of an empty set".into()));
    }
    let pooled = pma(tape, store, &format!("{prefix}.pma"), e, cfg)?;
    let refined = sab(tape, store, &format!("{prefix}.sab"), pooled, cfg)?;
    tape.reshape(refined, vec![1, cfg.pooled_dim()])
}

/// Standalone encoder application on a fresh tape.
pub fn encode_set<R: Real>(
    x: &Tensor<R>,
    cfg: &SetTransformerConfig,
    store: &mut ParamStore<R>,
) -> Result<EncodedSet<R>> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone())?;
    let out = encode_set_on(&mut tape, store, "st", xv, cfg)?;
    Ok(EncodedSet(tape.value(out).clone()))
}

/// Standalone decoder application on a fresh tape; returns the flat vector.
pub fn pool_set<R: Real>(
    e: &EncodedSet<R>,
    cfg: &SetTransformerConfig,
    store: &mut ParamStore<R>,
) -> Result<Tensor<R>> {
    let mut tape = Tape::new();
    let ev = tape.input(e.0.clone())?;
    let out = pool_set_on(&mut tape, store, "st", ev, cfg)?;
    Ok(tape.value(out).clone())
}
