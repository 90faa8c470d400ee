use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Fusion, ModelConfig};
use crate::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{self, AttentionWeights, Ctx, LayerConfig};

/// Splits a `[t, d]` sample into `n` contiguous `[t / n, d]` time chunks.
pub fn chunk_sample(x: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    let (t, _) = x.dims2()?;
    if n == 0 || t % n != 0 {
        return Err(Error::invalid(format!(
            "cannot split t = {t} hours into n = {n} equal chunks"
        )));
    }
    let len = t / n;
    (0..n).map(|j| x.narrow(0, j * len, len)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    /// Tokens are hours, each carrying `d` features.
    Temporal,
    /// Tokens are variables, each carrying `t / n` hourly values.
    Spatial,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Temporal => "temporal",
            Branch::Spatial => "spatial",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// One Encoder (block 0) or Fusion-Encoder (block j >= 1) evaluation.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub block: usize,
    /// The chunk fed to this block.
    pub input: Var,
    /// Previous block output used as the cross-attention key, if any.
    pub prev: Option<Var>,
    pub output: Var,
    pub self_attention: AttentionWeights,
    pub cross_attention: Option<AttentionWeights>,
}

/// Output of one branch: the final representation and every block it took.
#[derive(Clone, Debug)]
pub struct BranchState {
    pub branch: Branch,
    pub z: Var,
    pub blocks: Vec<BlockTrace>,
}

pub fn block_prefix(branch: Branch, block: usize) -> String {
    if block == 0 {
        format!("{}.encoder", branch.prefix())
    } else {
        format!("{}.fusion.{block}", branch.prefix())
    }
}

fn token_width(cfg: &ModelConfig, branch: Branch) -> usize {
    match branch {
        Branch::Temporal => cfg.d,
        Branch::Spatial => cfg.chunk_len(),
    }
}

fn token_count(cfg: &ModelConfig, branch: Branch) -> usize {
    match branch {
        Branch::Temporal => cfg.chunk_len(),
        Branch::Spatial => cfg.d,
    }
}

fn uses_pe(cfg: &ModelConfig, branch: Branch) -> bool {
    branch == Branch::Temporal || cfg.spatial_positional_encoding
}

fn init_branch(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    branch: Branch,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let lc = &cfg.layer;
    for block in 0..cfg.n {
        let pre = block_prefix(branch, block);
        layers::init_linear(
            store,
            &format!("{pre}.embed"),
            token_width(cfg, branch),
            lc.d_model,
            rng,
        )?;
        layers::init_attention(store, &format!("{pre}.msa"), lc, rng)?;
        if block > 0 {
            layers::init_v_mlp(store, &format!("{pre}.vmlp"), lc, rng)?;
            layers::init_attention(store, &format!("{pre}.mca"), lc, rng)?;
        }
        layers::init_ffn(store, &format!("{pre}.ffn"), lc, rng)?;
    }
    Ok(())
}

fn init_heads(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let (dm, c) = (cfg.layer.d_model, cfg.n_classes);
    match cfg.fusion {
        Fusion::TemporalOnly => layers::init_linear(store, "head.temporal", dm, c, rng),
        Fusion::SpatialOnly => layers::init_linear(store, "head.spatial", dm, c, rng),
        Fusion::MaxPool => {
            layers::init_linear(store, "head.temporal", dm, c, rng)?;
            layers::init_linear(store, "head.spatial", dm, c, rng)
        }
        Fusion::Concatenate => layers::init_linear(store, "head.concat", 2 * dm, c, rng),
        Fusion::Adding => {
            store.init_glorot("head.adding.wt", dm, c, rng)?;
            store.init_glorot("head.adding.ws", dm, c, rng)?;
            store.init_const("head.adding.b", vec![c], 0.0)
        }
        Fusion::Bilinear => layers::init_linear(store, "head.bilinear", dm * dm, c, rng),
    }
}

/// Embeds a chunk and adds positional encodings when the branch uses them.
fn embed(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    branch: Branch,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let expected = [token_count(cfg, branch), token_width(cfg, branch)];
    if g.shape(x) != expected {
        return Err(Error::shape("chunk", g.shape(x), &expected));
    }
    let e = layers::linear(g, p, &format!("{prefix}.embed"), x)?;
    if !uses_pe(cfg, branch) {
        return Ok(e);
    }
    let pe = g.constant(layers::positional_encoding(expected[0], cfg.layer.d_model)?);
    g.add(e, pe)
}

/// Encoder block: `z0 = FFN(MSA(embed(x0) + PE))`.
pub fn encoder_forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    branch: Branch,
    x0: Var,
    ctx: &mut Ctx,
) -> Result<BlockTrace> {
    let pre = block_prefix(branch, 0);
    let lc = &cfg.layer;
    let h = embed(g, p, cfg, branch, &pre, x0)?;
    let (z1, w) = layers::msa(g, p, &format!("{pre}.msa"), h, lc, ctx)?;
    let z = layers::ffn(g, p, &format!("{pre}.ffn"), z1, lc, ctx)?;
    Ok(BlockTrace {
        block: 0,
        input: x0,
        prev: None,
        output: z,
        self_attention: w,
        cross_attention: None,
    })
}

/// Fusion-Encoder block `j`: `Q = MSA(embed(x_j) + PE)`, `K = z_{j-1}`,
/// `V = MLP([Q, K])`, `z_j = FFN(MCA(Q, K, V))`.
#[allow(clippy::too_many_arguments)]
pub fn fusion_encoder_forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    branch: Branch,
    block: usize,
    xj: Var,
    z_prev: Var,
    ctx: &mut Ctx,
) -> Result<BlockTrace> {
    if block == 0 || block >= cfg.n {
        return Err(Error::invalid(format!(
            "fusion block index {block} outside 1..{}",
            cfg.n
        )));
    }
    if g.shape(xj)[0] != g.shape(z_prev)[0] {
        return Err(Error::shape(
            "fusion-encoder token length",
            g.shape(xj),
            g.shape(z_prev),
        ));
    }
    let pre = block_prefix(branch, block);
    let lc = &cfg.layer;
    let h = embed(g, p, cfg, branch, &pre, xj)?;
    let (q, w_self) = layers::msa(g, p, &format!("{pre}.msa"), h, lc, ctx)?;
    let k = z_prev;
    let v = layers::v_mlp(g, p, &format!("{pre}.vmlp"), q, k, lc)?;
    let (z1, w_cross) = layers::mca(g, p, &format!("{pre}.mca"), q, k, v, lc, ctx)?;
    let z = layers::ffn(g, p, &format!("{pre}.ffn"), z1, lc, ctx)?;
    Ok(BlockTrace {
        block,
        input: xj,
        prev: Some(z_prev),
        output: z,
        self_attention: w_self,
        cross_attention: Some(w_cross),
    })
}

/// Folds the Encoder and the `n - 1` Fusion-Encoders over pre-arranged
/// chunks (time-major for the temporal branch, transposed for the spatial one).
pub fn branch_forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    branch: Branch,
    chunks: &[Var],
    ctx: &mut Ctx,
) -> Result<BranchState> {
    if chunks.len() != cfg.n {
        return Err(Error::invalid(format!(
            "expected {} chunks, got {}",
            cfg.n,
            chunks.len()
        )));
    }
    let first = encoder_forward(g, p, cfg, branch, chunks[0], ctx)?;
    let mut z = first.output;
    let mut blocks = vec![first];
    for (j, &xj) in chunks.iter().enumerate().skip(1) {
        let trace = fusion_encoder_forward(g, p, cfg, branch, j, xj, z, ctx)?;
        z = trace.output;
        blocks.push(trace);
    }
    Ok(BranchState { branch, z, blocks })
}

/// Places the chunks of `x` on the graph in the layout `branch` expects.
pub fn branch_inputs(g: &mut Graph, x: &Tensor, n: usize, branch: Branch) -> Result<Vec<Var>> {
    chunk_sample(x, n)?
        .into_iter()
        .map(|c| {
            let c = match branch {
                Branch::Temporal => c,
                Branch::Spatial => c.transpose()?,
            };
            Ok(g.constant(c))
        })
        .collect()
}

fn pooled(g: &mut Graph, state: &BranchState) -> Result<Var> {
    g.mean(state.z, 0)
}

fn activate(g: &mut Graph, cfg: &ModelConfig, logits: Var) -> Result<Var> {
    if cfg.task.is_multilabel() {
        Ok(g.sigmoid(logits))
    } else {
        g.softmax(logits, 1)
    }
}

/// Pools each branch over its tokens and applies the configured fusion head.
/// Returns a `[n_classes]` probability vector.
pub fn fuse_and_predict(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    temporal: Option<&BranchState>,
    spatial: Option<&BranchState>,
) -> Result<Var> {
    let need_t = cfg.fusion.uses_temporal();
    let need_s = cfg.fusion.uses_spatial();
    if need_t != temporal.is_some() || need_s != spatial.is_some() {
        return Err(Error::Config(format!(
            "fusion `{}` got temporal = {}, spatial = {}",
            cfg.fusion,
            temporal.is_some(),
            spatial.is_some()
        )));
    }
    let dm = cfg.layer.d_model;
    for (state, branch) in [(temporal, Branch::Temporal), (spatial, Branch::Spatial)] {
        if let Some(s) = state {
            let expected = [token_count(cfg, branch), dm];
            if s.branch != branch || g.shape(s.z) != expected {
                return Err(Error::shape("branch state", g.shape(s.z), &expected));
            }
        }
    }
    let vt = temporal.map(|s| pooled(g, s)).transpose()?;
    let vs = spatial.map(|s| pooled(g, s)).transpose()?;

    let probs = match cfg.fusion {
        Fusion::TemporalOnly => {
            let l = layers::linear(g, p, "head.temporal", vt.unwrap())?;
            activate(g, cfg, l)?
        }
        Fusion::SpatialOnly => {
            let l = layers::linear(g, p, "head.spatial", vs.unwrap())?;
            activate(g, cfg, l)?
        }
        Fusion::Concatenate => {
            let v = g.concat(&[vt.unwrap(), vs.unwrap()], 1)?;
            let l = layers::linear(g, p, "head.concat", v)?;
            activate(g, cfg, l)?
        }
        Fusion::Adding => {
            let a = g.matmul(vt.unwrap(), p.get("head.adding.wt")?)?;
            let b = g.matmul(vs.unwrap(), p.get("head.adding.ws")?)?;
            let ab = g.add(a, b)?;
            let bias = g.broadcast_rows(p.get("head.adding.b")?, 1)?;
            let l = g.add(ab, bias)?;
            activate(g, cfg, l)?
        }
        Fusion::Bilinear => {
            let col = g.transpose(vt.unwrap())?;
            let outer = g.matmul(col, vs.unwrap())?;
            let flat = g.reshape(outer, vec![1, dm * dm])?;
            let l = layers::linear(g, p, "head.bilinear", flat)?;
            activate(g, cfg, l)?
        }
        Fusion::MaxPool => {
            let lt = layers::linear(g, p, "head.temporal", vt.unwrap())?;
            let pt = activate(g, cfg, lt)?;
            let ls = layers::linear(g, p, "head.spatial", vs.unwrap())?;
            let ps = activate(g, cfg, ls)?;
            let m = g.maximum(pt, ps)?;
            if cfg.task.is_multilabel() {
                m
            } else {
                let total = g.sum_all(m);
                g.div(m, total)?
            }
        }
    };
    g.reshape(probs, vec![cfg.n_classes])
}

/// Everything one forward pass produced.
#[derive(Debug)]
pub struct Forward {
    pub probs: Var,
    pub temporal: Option<BranchState>,
    pub spatial: Option<BranchState>,
}

/// Block counts of one branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchLayout {
    pub encoders: usize,
    pub fusion_encoders: usize,
}

/// The two-branch network and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Tscan {
    config: ModelConfig,
    params: ParamStore,
}

impl Tscan {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Self::initial_params(&config, seed)?;
        Ok(Tscan { config, params })
    }

    fn initial_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        if config.fusion.uses_temporal() {
            init_branch(&mut store, config, Branch::Temporal, &mut rng)?;
        }
        if config.fusion.uses_spatial() {
            init_branch(&mut store, config, Branch::Spatial, &mut rng)?;
        }
        init_heads(&mut store, config, &mut rng)?;
        Ok(store)
    }

    /// Reassembles a model, checking that `params` has exactly the names and
    /// shapes `config` requires.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let template = Self::initial_params(&config, 0)?;
        let expected: Vec<_> = template.iter().map(|(k, t)| (k, t.shape())).collect();
        let got: Vec<_> = params.iter().map(|(k, t)| (k, t.shape())).collect();
        if expected != got {
            let missing = expected.iter().find(|e| !got.contains(e)).map(|e| e.0);
            let extra = got.iter().find(|e| !expected.contains(e)).map(|e| e.0);
            return Err(Error::Checkpoint(format!(
                "parameters do not match the model config (first missing: {missing:?}, first unexpected: {extra:?})"
            )));
        }
        Ok(Tscan { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer(&self) -> &LayerConfig {
        &self.config.layer
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Encoder / Fusion-Encoder counts of `branch`, read from the parameter store.
    pub fn layout(&self, branch: Branch) -> BranchLayout {
        let prefix = branch.prefix();
        let mut encoders = 0;
        let mut fusion = std::collections::BTreeSet::new();
        for name in self.params.names() {
            if name == format!("{prefix}.encoder.embed.w") {
                encoders += 1;
            }
            if let Some(rest) = name.strip_prefix(&format!("{prefix}.fusion.")) {
                if rest.ends_with(".embed.w") {
                    fusion.insert(rest.split('.').next().unwrap_or_default().to_string());
                }
            }
        }
        BranchLayout {
            encoders,
            fusion_encoders: fusion.len(),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = [self.config.t, self.config.d];
        if x.shape() != expected {
            return Err(Error::shape("model input", x.shape(), &expected));
        }
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("model input contains NaN or Inf"));
        }
        Ok(())
    }

    /// Records the full forward pass of one `[t, d]` sample on `g`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: &Tensor, ctx: &mut Ctx) -> Result<Forward> {
        self.check_input(x)?;
        let cfg = &self.config;
        let temporal = if cfg.fusion.uses_temporal() {
            let chunks = branch_inputs(g, x, cfg.n, Branch::Temporal)?;
            Some(branch_forward(g, p, cfg, Branch::Temporal, &chunks, ctx)?)
        } else {
            None
        };
        let spatial = if cfg.fusion.uses_spatial() {
            let chunks = branch_inputs(g, x, cfg.n, Branch::Spatial)?;
            Some(branch_forward(g, p, cfg, Branch::Spatial, &chunks, ctx)?)
        } else {
            None
        };
        let probs = fuse_and_predict(g, p, cfg, temporal.as_ref(), spatial.as_ref())?;
        Ok(Forward {
            probs,
            temporal,
            spatial,
        })
    }

    /// Inference-mode probabilities for one sample.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let out = self.forward(&mut g, &p, x, &mut Ctx::eval())?;
        Ok(g.value(out.probs).clone())
    }

    /// Inference-mode probabilities plus the self-attention maps of every
    /// block, in block order, for the temporal and spatial branch.
    pub fn predict_with_attention(
        &self,
        x: &Tensor,
    ) -> Result<(Tensor, Vec<AttentionWeights>, Vec<AttentionWeights>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let out = self.forward(&mut g, &p, x, &mut Ctx::eval())?;
        let maps = |s: Option<BranchState>| -> Vec<AttentionWeights> {
            s.map(|s| s.blocks.into_iter().map(|b| b.self_attention).collect())
                .unwrap_or_default()
        };
        Ok((
            g.value(out.probs).clone(),
            maps(out.temporal),
            maps(out.spatial),
        ))
    }

    /// Writes the parameter file at `path` and the config sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.params.save(path)?;
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config: ModelConfig = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        let params = ParamStore::load(path)?;
        Self::from_parts(config, params)
    }
}

/// `model.ckpt` -> `model.ckpt.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}
