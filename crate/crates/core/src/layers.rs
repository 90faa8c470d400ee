//! Transformer building blocks: sinusoidal positional encoding, multi-head
//! self- and cross-attention, the position-wise feed-forward block and the
//! MLP that produces fusion values from concatenated queries and keys.
//!
//! Every layer reads its parameters from a [`Bound`] store under a name
//! prefix, e.g. `temporal.fusion.1.mca` owns `temporal.fusion.1.mca.wq`.
//! Attention and feed-forward sublayers are wrapped in a residual connection
//! followed by an affine layer norm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
}

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            dropout_rate: 0.1,
        }
    }
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_model {} must be even for positional encoding",
                self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Attention probabilities of one forward pass, shaped `[n_heads, L_q, L_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub probs: Tensor,
}

impl AttentionWeights {
    pub fn n_heads(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn query_len(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn key_len(&self) -> usize {
        self.probs.shape()[2]
    }

    /// Attention received by each key position, averaged over heads and
    /// query rows. Sums to one because every row does.
    pub fn received(&self) -> Vec<f64> {
        let (h, q, k) = (self.n_heads(), self.query_len(), self.key_len());
        let mut out = vec![0.0; k];
        for row in self.probs.data().chunks(k) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let denom = (h * q) as f64;
        out.iter_mut().for_each(|o| *o /= denom);
        out
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_error(&self) -> f64 {
        self.probs
            .data()
            .chunks(self.key_len())
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Forward-pass mode. Dropout is only active in training mode and draws
/// from an explicit seeded stream.
pub struct Ctx {
    train: bool,
    dropout_rate: f64,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            train: false,
            dropout_rate: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(dropout_rate: f64, seed: u64) -> Self {
        Ctx {
            train: true,
            dropout_rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Inverted dropout: surviving activations are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        if !self.train || self.dropout_rate == 0.0 {
            return x;
        }
        let keep = 1.0 - self.dropout_rate;
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(g.shape(x).to_vec(), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = g.constant(mask);
        g.mul(x, m).expect("mask shares the input shape")
    }
}

/// Fixed sinusoidal table: `PE[p, 2i] = sin(p / 10000^(2i/d))` and
/// `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(length: usize, d_model: usize) -> Result<Tensor> {
    if length == 0 {
        return Err(Error::invalid("positional encoding length must be >= 1"));
    }
    if d_model < 2 || !d_model.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "positional encoding needs an even d_model >= 2, got {d_model}"
        )));
    }
    let mut data = vec![0.0; length * d_model];
    for p in 0..length {
        for i in 0..d_model / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[p * d_model + 2 * i] = angle.sin();
            data[p * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![length, d_model], data)
}

fn name(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.init_glorot(name(prefix, "w"), fan_in, fan_out, rng)?;
    store.init_const(name(prefix, "b"), vec![fan_out], 0.0)
}

fn init_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.init_const(name(prefix, "ln_g"), vec![d], 1.0)?;
    store.init_const(name(prefix, "ln_b"), vec![d], 0.0)
}

/// Query/key/value/output projections plus the post-residual norm.
pub fn init_attention(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &LayerConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let d = cfg.d_model;
    for m in ["q", "k", "v", "o"] {
        store.init_glorot(name(prefix, &format!("w{m}")), d, d, rng)?;
        store.init_const(name(prefix, &format!("b{m}")), vec![d], 0.0)?;
    }
    init_norm(store, prefix, d)
}

pub fn init_ffn(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &LayerConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    store.init_glorot(name(prefix, "w1"), cfg.d_model, cfg.d_ff, rng)?;
    store.init_const(name(prefix, "b1"), vec![cfg.d_ff], 0.0)?;
    store.init_glorot(name(prefix, "w2"), cfg.d_ff, cfg.d_model, rng)?;
    store.init_const(name(prefix, "b2"), vec![cfg.d_model], 0.0)?;
    init_norm(store, prefix, cfg.d_model)
}

/// Two-layer MLP from `2 * d_model` back to `d_model`.
pub fn init_v_mlp(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &LayerConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let d = cfg.d_model;
    store.init_glorot(name(prefix, "w1"), 2 * d, d, rng)?;
    store.init_const(name(prefix, "b1"), vec![d], 0.0)?;
    store.init_glorot(name(prefix, "w2"), d, d, rng)?;
    store.init_const(name(prefix, "b2"), vec![d], 0.0)
}

/// `x W + b` with the bias repeated over rows.
pub fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let rows = g.shape(x)[0];
    let xw = g.matmul(x, w)?;
    let bias = g.broadcast_rows(b, rows)?;
    g.add(xw, bias)
}

pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    affine(g, x, p.get(&name(prefix, "w"))?, p.get(&name(prefix, "b"))?)
}

fn norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let rows = g.shape(x)[0];
    let normed = g.layer_norm(x)?;
    let gain = g.broadcast_rows(p.get(&name(prefix, "ln_g"))?, rows)?;
    let bias = g.broadcast_rows(p.get(&name(prefix, "ln_b"))?, rows)?;
    let scaled = g.mul(normed, gain)?;
    g.add(scaled, bias)
}

fn check_width(g: &Graph, x: Var, d_model: usize, what: &'static str) -> Result<usize> {
    match g.shape(x) {
        [l, w] if *w == d_model => Ok(*l),
        other => Err(Error::shape(
            what,
            other,
            &[other.first().copied().unwrap_or(0), d_model],
        )),
    }
}

/// Scaled dot-product attention with learned projections, before the
/// residual connection and norm: per head `softmax(Q_h K_hᵀ / sqrt(d_head)) V_h`,
/// heads concatenated and projected by `W_o`.
pub fn attention_core(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    cfg: &LayerConfig,
) -> Result<(Var, AttentionWeights)> {
    let lq = check_width(g, q_in, cfg.d_model, "attention query")?;
    let lk = check_width(g, k_in, cfg.d_model, "attention key")?;
    let lv = check_width(g, v_in, cfg.d_model, "attention value")?;
    if lk != lv {
        return Err(Error::shape(
            "attention key/value length",
            g.shape(k_in),
            g.shape(v_in),
        ));
    }
    let proj = |g: &mut Graph, x: Var, m: &str| -> Result<Var> {
        affine(
            g,
            x,
            p.get(&name(prefix, &format!("w{m}")))?,
            p.get(&name(prefix, &format!("b{m}")))?,
        )
    };
    let q = proj(g, q_in, "q")?;
    let k = proj(g, k_in, "k")?;
    let v = proj(g, v_in, "v")?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut probs = Vec::with_capacity(cfg.n_heads * lq * lk);
    for h in 0..cfg.n_heads {
        let qh = g.narrow(q, 1, h * dh, dh)?;
        let kh = g.narrow(k, 1, h * dh, dh)?;
        let vh = g.narrow(v, 1, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores, 1)?;
        probs.extend_from_slice(g.value(attn).data());
        heads.push(g.matmul(attn, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat(&heads, 1)?
    };
    let out = proj(g, merged, "o")?;
    let weights = AttentionWeights {
        probs: Tensor::new(vec![cfg.n_heads, lq, lk], probs)?,
    };
    Ok((out, weights))
}

/// Multi-head self-attention sublayer: `norm(x + dropout(attn(x, x, x)))`.
pub fn msa(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    cfg: &LayerConfig,
    ctx: &mut Ctx,
) -> Result<(Var, AttentionWeights)> {
    let (out, weights) = attention_core(g, p, prefix, x, x, x, cfg)?;
    let out = ctx.dropout(g, out);
    let res = g.add(x, out)?;
    Ok((norm(g, p, prefix, res)?, weights))
}

/// Multi-head cross-attention sublayer with the residual taken from `q`.
#[allow(clippy::too_many_arguments)]
pub fn mca(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    q: Var,
    k: Var,
    v: Var,
    cfg: &LayerConfig,
    ctx: &mut Ctx,
) -> Result<(Var, AttentionWeights)> {
    let (out, weights) = attention_core(g, p, prefix, q, k, v, cfg)?;
    let out = ctx.dropout(g, out);
    let res = g.add(q, out)?;
    Ok((norm(g, p, prefix, res)?, weights))
}

/// Position-wise feed-forward sublayer:
/// `norm(x + dropout(relu(x W1 + b1) W2 + b2))`.
pub fn ffn(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    cfg: &LayerConfig,
    ctx: &mut Ctx,
) -> Result<Var> {
    check_width(g, x, cfg.d_model, "ffn input")?;
    let h = affine(
        g,
        x,
        p.get(&name(prefix, "w1"))?,
        p.get(&name(prefix, "b1"))?,
    )?;
    let h = g.relu(h);
    let out = affine(
        g,
        h,
        p.get(&name(prefix, "w2"))?,
        p.get(&name(prefix, "b2"))?,
    )?;
    let out = ctx.dropout(g, out);
    let res = g.add(x, out)?;
    norm(g, p, prefix, res)
}

/// Fusion values from queries and keys concatenated on the feature axis.
pub fn v_mlp(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    q: Var,
    k: Var,
    cfg: &LayerConfig,
) -> Result<Var> {
    if g.shape(q) != g.shape(k) {
        return Err(Error::shape("v_mlp", g.shape(q), g.shape(k)));
    }
    check_width(g, q, cfg.d_model, "v_mlp input")?;
    let qk = g.concat(&[q, k], 1)?;
    let h = affine(
        g,
        qk,
        p.get(&name(prefix, "w1"))?,
        p.get(&name(prefix, "b1"))?,
    )?;
    let h = g.relu(h);
    affine(
        g,
        h,
        p.get(&name(prefix, "w2"))?,
        p.get(&name(prefix, "b2"))?,
    )
}
