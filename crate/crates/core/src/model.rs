//! Hierarchical clustering encoder with a classification head.
//!
//! Pipeline: patch embedding → stages of (center init → recurrent clustering
//! → feature dispatch → FFN) blocks, with 2×2 pooling and a channel
//! projection between stages → mean of final-stage centers → linear head.
//!
//! Each block is pre-norm:
//!
//! ```text
//! n  = LN1(x)
//! C0 = init_centers(n, K)
//! C  = recurrent_cluster(n, C0, T)
//! x  = x + dispatch_mlp(aggregate(n, C))
//! x  = x + FFN(LN2(x))
//! ```

use std::fmt::Write as _;

use crate::autodiff::{Graph, Var};
use crate::cluster::{
    dispatch_update, init_centers, recurrent_cluster, Activation, ClusterState, FeedForward,
    LayerNormParams, Linear, RcaOptions, RcaParams, Similarity,
};
use crate::error::{Error, Result};
use crate::params::{collect_grads, Layout, ParamSource, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub stage_depths: Vec<usize>,
    pub stage_dims: Vec<usize>,
    /// Requested centers per stage; clamped to the stage's token count.
    pub stage_k: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub head_dim: usize,
    /// Clustering iterations per layer.
    pub iterations: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub activation: Activation,
    pub similarity: Similarity,
    pub logit_scale: Option<f64>,
    pub m_step_residual: bool,
    pub ffn_ratio: usize,
}

impl Default for ModelConfig {
    /// Four-stage 224² layout with Swin-Tiny widths and depths.
    fn default() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 4,
            in_channels: 3,
            stage_depths: vec![2, 2, 6, 2],
            stage_dims: vec![96, 192, 384, 768],
            stage_k: vec![100; 4],
            num_heads: vec![3, 6, 12, 24],
            head_dim: 32,
            iterations: 3,
            num_classes: 1000,
            seed: 0,
            activation: Activation::Gelu,
            similarity: Similarity::Cosine,
            logit_scale: None,
            m_step_residual: false,
            ffn_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and the synthetic benchmark.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            in_channels: 1,
            stage_depths: vec![1, 1],
            stage_dims: vec![16, 32],
            stage_k: vec![4, 4],
            num_heads: vec![2, 4],
            head_dim: 8,
            iterations: 3,
            num_classes: 3,
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.num_stages();
        let bad = |msg: String| Err(Error::Config(msg));
        if s == 0 {
            return bad("at least one stage is required".into());
        }
        for (name, len) in [
            ("stage_depths", self.stage_depths.len()),
            ("stage_k", self.stage_k.len()),
            ("num_heads", self.num_heads.len()),
        ] {
            if len != s {
                return bad(format!("{name} has {len} entries, expected {s}"));
            }
        }
        if self.patch_size == 0 || self.in_channels == 0 || self.head_dim == 0 {
            return bad("patch_size, in_channels and head_dim must be positive".into());
        }
        if self.iterations == 0 {
            return bad("iterations (T) must be >= 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.ffn_ratio == 0 {
            return bad("ffn_ratio must be >= 1".into());
        }
        let factor = self.patch_size << (s - 1);
        if self.image_size == 0 || self.image_size % factor != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size·2^(stages−1) = {factor}",
                self.image_size
            ));
        }
        for i in 0..s {
            if self.stage_depths[i] == 0 || self.stage_k[i] == 0 {
                return bad(format!("stage {i}: depth and K must be >= 1"));
            }
            if self.stage_dims[i] != self.num_heads[i] * self.head_dim {
                return bad(format!(
                    "stage {i}: width {} != num_heads {} × head_dim {}",
                    self.stage_dims[i], self.num_heads[i], self.head_dim
                ));
            }
        }
        if let Some(scale) = self.logit_scale {
            if !(scale.is_finite() && scale > 0.0) {
                return bad(format!("logit_scale must be positive, got {scale}"));
            }
        }
        Ok(())
    }

    /// Token grid side at `stage` (square inputs).
    pub fn stage_grid(&self, stage: usize) -> usize {
        self.image_size / self.patch_size >> stage
    }

    /// Centers used at `stage`: the requested K clamped to the token count.
    pub fn effective_k(&self, stage: usize) -> usize {
        let tokens = self.stage_grid(stage).pow(2);
        self.stage_k[stage].min(tokens)
    }

    /// Logs a warning for every stage whose K is clamped.
    pub fn warn_clamped_k(&self) {
        for s in 0..self.num_stages() {
            let tokens = self.stage_grid(s).pow(2);
            if self.stage_k[s] > tokens {
                log::warn!(
                    "stage {s}: K={} exceeds {tokens} tokens, clamped to {tokens}",
                    self.stage_k[s]
                );
            }
        }
    }

    pub fn rca_options(&self, stage: usize) -> RcaOptions {
        RcaOptions {
            num_heads: self.num_heads[stage],
            head_dim: self.head_dim,
            logit_scale: self.logit_scale,
            similarity: self.similarity,
            m_step_residual: self.m_step_residual,
            activation: self.activation,
            ffn_ratio: self.ffn_ratio,
        }
    }

    pub fn layout(&self) -> Result<Layout> {
        self.validate()?;
        let mut l = Layout::default();
        ModelVars::declare(&mut l, self)?;
        Ok(l)
    }

    /// Flat `key=value` text, one entry per line.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let _ = writeln!(s, "image_size={}", self.image_size);
        let _ = writeln!(s, "patch_size={}", self.patch_size);
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "stage_depths={}", list(&self.stage_depths));
        let _ = writeln!(s, "stage_dims={}", list(&self.stage_dims));
        let _ = writeln!(s, "stage_k={}", list(&self.stage_k));
        let _ = writeln!(s, "num_heads={}", list(&self.num_heads));
        let _ = writeln!(s, "head_dim={}", self.head_dim);
        let _ = writeln!(s, "iterations={}", self.iterations);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "activation={}", self.activation);
        let _ = writeln!(s, "similarity={}", self.similarity);
        match self.logit_scale {
            // {:?} keeps the shortest exact round-trip representation
            Some(v) => {
                let _ = writeln!(s, "logit_scale={v:?}");
            }
            None => {
                let _ = writeln!(s, "logit_scale=auto");
            }
        }
        let _ = writeln!(s, "m_step_residual={}", self.m_step_residual);
        let _ = writeln!(s, "ffn_ratio={}", self.ffn_ratio);
        s
    }

    /// Parses `key=value` lines over the defaults of `base`. Blank lines and
    /// `#` comments are ignored; unknown keys are errors.
    pub fn parse_over(base: ModelConfig, text: &str) -> Result<Self> {
        let mut c = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            c.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::parse_over(ModelConfig::default(), text)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|p| num(key, p.trim())).collect()
        }
        match key {
            "image_size" => self.image_size = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "in_channels" => self.in_channels = num(key, value)?,
            "stage_depths" => self.stage_depths = list(key, value)?,
            "stage_dims" => self.stage_dims = list(key, value)?,
            "stage_k" => self.stage_k = list(key, value)?,
            "num_heads" => self.num_heads = list(key, value)?,
            "head_dim" => self.head_dim = num(key, value)?,
            "iterations" | "T" => self.iterations = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "activation" => self.activation = value.parse()?,
            "similarity" => self.similarity = value.parse()?,
            "logit_scale" => {
                self.logit_scale = match value {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "m_step_residual" => self.m_step_residual = num(key, value)?,
            "ffn_ratio" => self.ffn_ratio = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub norm1: LayerNormParams,
    pub rca: RcaParams,
    pub norm2: LayerNormParams,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct StageVars {
    /// Pooling projection from the previous stage's width (absent on stage 0).
    pub downsample: Option<Linear>,
    pub blocks: Vec<BlockVars>,
}

/// Every parameter of the model, as graph handles.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub patch_embed: Linear,
    pub patch_norm: LayerNormParams,
    pub stages: Vec<StageVars>,
    pub head_norm: LayerNormParams,
    pub head: Linear,
}

impl ModelVars {
    /// Declares parameters in canonical order. Drives both the checkpoint
    /// layout and graph binding.
    pub fn declare(src: &mut impl ParamSource, config: &ModelConfig) -> Result<Self> {
        let d0 = config.stage_dims[0];
        let patch_in = config.patch_size * config.patch_size * config.in_channels;
        let patch_embed = Linear::declare(src, "patch_embed", patch_in, d0)?;
        let patch_norm = LayerNormParams::declare(src, "patch_norm", d0)?;
        let mut stages = Vec::with_capacity(config.num_stages());
        for s in 0..config.num_stages() {
            let d = config.stage_dims[s];
            let downsample = if s > 0 {
                Some(Linear::declare(
                    src,
                    &format!("stages.{s}.downsample"),
                    config.stage_dims[s - 1],
                    d,
                )?)
            } else {
                None
            };
            let mut blocks = Vec::with_capacity(config.stage_depths[s]);
            for l in 0..config.stage_depths[s] {
                let p = format!("stages.{s}.blocks.{l}");
                blocks.push(BlockVars {
                    norm1: LayerNormParams::declare(src, &format!("{p}.norm1"), d)?,
                    rca: RcaParams::declare(src, &format!("{p}.rca"), config.rca_options(s))?,
                    norm2: LayerNormParams::declare(src, &format!("{p}.norm2"), d)?,
                    ffn: FeedForward::declare(
                        src,
                        &format!("{p}.ffn"),
                        d,
                        config.ffn_ratio * d,
                        config.activation,
                    )?,
                });
            }
            stages.push(StageVars { downsample, blocks });
        }
        let dl = *config.stage_dims.last().expect("validated");
        let head_norm = LayerNormParams::declare(src, "head_norm", dl)?;
        let head = Linear::declare(src, "head", dl, config.num_classes)?;
        Ok(ModelVars {
            patch_embed,
            patch_norm,
            stages,
            head_norm,
            head,
        })
    }
}

/// Clustering result of one stage, for visualization.
#[derive(Debug, Clone, Copy)]
pub struct StageOutput {
    pub state: ClusterState,
    /// Token grid `(h, w)` the assignment columns are laid out on.
    pub grid: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `1×num_classes`.
    pub logits: Var,
    pub stages: Vec<StageOutput>,
}

/// Splits an `H×W×C` image into non-overlapping patches, projects them and
/// normalizes. Returns `(h·w)×D` tokens and the grid `(h, w)`.
pub fn patch_embed<F: Real>(
    g: &mut Graph<F>,
    image: Var,
    patch: usize,
    embed: &Linear,
    norm: &LayerNormParams,
) -> Result<(Var, (usize, usize))> {
    let (ih, iw, c) = match g.shape(image) {
        &[h, w, c] => (h, w, c),
        s => {
            return Err(Error::Bounds {
                op: "patch_embed",
                msg: format!("expected H×W×C image, got {s:?}"),
            })
        }
    };
    if patch == 0 || ih % patch != 0 || iw % patch != 0 {
        return Err(Error::Config(format!(
            "image {ih}×{iw} not divisible by patch size {patch}"
        )));
    }
    let (h, w) = (ih / patch, iw / patch);
    let tokens = patchify_index(ih, iw, c, patch);
    let flat = g.gather(image, tokens, &[h * w, patch * patch * c])?;
    let x = embed.forward(g, flat)?;
    Ok((norm.forward(g, x)?, (h, w)))
}

/// Flat image index for each (token, in-patch offset) position.
pub fn patchify_index(ih: usize, iw: usize, c: usize, patch: usize) -> Vec<usize> {
    let (h, w) = (ih / patch, iw / patch);
    let mut index = Vec::with_capacity(ih * iw * c);
    for ti in 0..h {
        for tj in 0..w {
            for pi in 0..patch {
                for pj in 0..patch {
                    let base = ((ti * patch + pi) * iw + tj * patch + pj) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    index
}

/// One pre-norm clustering block. Returns the new tokens and its cluster state.
pub fn block_forward<F: Real>(
    g: &mut Graph<F>,
    tokens: Var,
    grid: (usize, usize),
    k: usize,
    iterations: usize,
    block: &BlockVars,
) -> Result<(Var, ClusterState)> {
    let d = g.shape(tokens)[1];
    let n = block.norm1.forward(g, tokens)?;
    let n_grid = g.reshape(n, &[grid.0, grid.1, d])?;
    let c0 = init_centers(g, n_grid, k, &block.rca)?;
    let state = recurrent_cluster(g, n, c0, iterations, &block.rca)?;
    let upd = dispatch_update(g, n, state.centers, &block.rca)?;
    let x = g.add(tokens, upd)?;
    let n2 = block.norm2.forward(g, x)?;
    let f = block.ffn.forward(g, n2)?;
    Ok((g.add(x, f)?, state))
}

/// Runs every block of a stage; returns final tokens and the last block's state.
pub fn stage_forward<F: Real>(
    g: &mut Graph<F>,
    tokens: Var,
    grid: (usize, usize),
    k: usize,
    iterations: usize,
    stage: &StageVars,
) -> Result<(Var, ClusterState)> {
    let mut x = tokens;
    let mut last = None;
    for block in &stage.blocks {
        let (nx, st) = block_forward(g, x, grid, k, iterations, block)?;
        x = nx;
        last = Some(st);
    }
    let state = last.ok_or_else(|| Error::Config("stage without blocks".into()))?;
    Ok((x, state))
}

/// 2×2 average pooling of an `h×w` token grid, then a channel projection.
pub fn downsample<F: Real>(g: &mut Graph<F>, tokens: Var, grid: (usize, usize), proj: &Linear) -> Result<(Var, (usize, usize))> {
    let (h, w) = grid;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Bounds {
            op: "downsample",
            msg: format!("token grid {h}×{w} has odd extents"),
        });
    }
    let d = g.shape(tokens)[1];
    let as_grid = g.reshape(tokens, &[h, w, d])?;
    let pooled = g.adaptive_avg_pool(as_grid, h / 2, w / 2)?;
    let flat = g.reshape(pooled, &[(h / 2) * (w / 2), d])?;
    Ok((proj.forward(g, flat)?, (h / 2, w / 2)))
}

/// Mean over centers, then one linear layer: `1×num_classes` logits.
pub fn classify<F: Real>(g: &mut Graph<F>, centers: Var, head: &Linear) -> Result<Var> {
    let pooled = g.mean_rows(centers)?;
    head.forward(g, pooled)
}

/// Full forward pass over bound parameters.
pub fn model_forward<F: Real>(g: &mut Graph<F>, image: Var, vars: &ModelVars, config: &ModelConfig) -> Result<ForwardOutput> {
    let expected = [config.image_size, config.image_size, config.in_channels];
    if g.shape(image) != expected {
        return Err(Error::shape("model_forward", g.shape(image), &expected));
    }
    let (mut x, mut grid) = patch_embed(g, image, config.patch_size, &vars.patch_embed, &vars.patch_norm)?;
    let mut stages = Vec::with_capacity(vars.stages.len());
    for (s, stage) in vars.stages.iter().enumerate() {
        if let Some(proj) = &stage.downsample {
            (x, grid) = downsample(g, x, grid, proj)?;
        }
        let (nx, state) = stage_forward(g, x, grid, config.effective_k(s), config.iterations, stage)?;
        x = nx;
        stages.push(StageOutput { state, grid });
    }
    let centers = stages.last().expect("validated").state.centers;
    let normed = vars.head_norm.forward(g, centers)?;
    let logits = classify(g, normed, &vars.head)?;
    Ok(ForwardOutput { logits, stages })
}

/// Configuration plus parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

/// Truncated-normal (std 0.02) weights, zero biases, unit norm gains, all
/// derived from `seed`.
pub fn init_params<F: Real>(config: &ModelConfig, seed: u64) -> Result<Model<F>> {
    let layout = config.layout()?;
    Ok(Model {
        config: config.clone(),
        params: ParamStore::init(&layout, seed),
    })
}

/// Total scalar parameter count of a configuration.
pub fn param_count_for(config: &ModelConfig) -> Result<usize> {
    Ok(config.layout()?.numel())
}

/// Total scalar parameter count of a model.
pub fn param_count<F: Real>(model: &Model<F>) -> usize {
    model.params.numel()
}

impl<F: Real> Model<F> {
    /// Initializes from `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        init_params(config, config.seed)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        params.validate(&config.layout()?)?;
        Ok(Model { config, params })
    }

    /// Binds parameters onto `g` (trainable when `trainable`).
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Result<(ModelVars, Vec<Var>)> {
        let mut b = self.params.binder(g);
        if !trainable {
            b = b.frozen();
        }
        let vars = ModelVars::declare(&mut b, &self.config)?;
        Ok((vars, b.finish()))
    }

    pub fn check_image(&self, image: &Tensor<F>) -> Result<()> {
        let c = &self.config;
        let expected = [c.image_size, c.image_size, c.in_channels];
        if image.shape() != expected {
            return Err(Error::shape("model input", image.shape(), &expected));
        }
        Ok(())
    }

    /// Inference: logits and per-stage outputs on a fresh graph.
    pub fn forward(&self, image: &Tensor<F>) -> Result<(Graph<F>, ForwardOutput)> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let (vars, _) = self.bind(&mut g, false)?;
        let x = g.constant(image.clone());
        let out = model_forward(&mut g, x, &vars, &self.config)?;
        Ok((g, out))
    }

    pub fn logits(&self, image: &Tensor<F>) -> Result<Vec<F>> {
        let (g, out) = self.forward(image)?;
        Ok(g.value(out.logits).data().to_vec())
    }

    /// Cross-entropy of one sample and the gradient of every parameter,
    /// parallel to the store entries. `weight` scales the loss.
    pub fn loss_and_grads(&self, image: &Tensor<F>, label: usize, weight: F) -> Result<(F, Vec<F>, Vec<Vec<F>>)> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let (vars, handles) = self.bind(&mut g, true)?;
        let x = g.constant(image.clone());
        let out = model_forward(&mut g, x, &vars, &self.config)?;
        let ce = g.cross_entropy(out.logits, &[label])?;
        let loss = g.value(ce).data()[0];
        let logits = g.value(out.logits).data().to_vec();
        let scaled = g.scale(ce, weight);
        g.backward(scaled)?;
        Ok((loss, logits, collect_grads(&self.params, &g, &handles)))
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}
