//! Recurrent cross-attention clustering.
//!
//! Centers `C` (K×D) act as queries against token features `I` (HW×D):
//!
//! * E-step: `M = softmax_K(Q(C) · K(I)ᵀ · scale)`, a K×HW soft assignment
//!   whose columns are distributions over clusters.
//! * M-step: `C = M · V(I)`.
//!
//! The key and value projections of the features are computed once per call
//! to [`recurrent_cluster`]; only the query projection is recomputed from the
//! current centers on each of the `T` iterations, and all iterations share one
//! set of projection weights.
//!
//! With several heads, the softmax runs per head and the M-step uses each
//! head's own assignment on its own channel slice. The returned assignment is
//! the mean over heads.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamSource, INIT_STD};
use crate::tensor::Real;

/// Norm clamp used by cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "identity" | "none" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Gelu => "gelu",
            Activation::Identity => "identity",
        })
    }
}

/// Similarity used when dispatching centers back onto features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Cosine,
    /// `p·c / sqrt(D)`.
    ScaledDot,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "scaled_dot" | "dot" => Ok(Similarity::ScaledDot),
            other => Err(Error::Config(format!("unknown similarity '{other}'"))),
        }
    }
}

impl std::fmt::Display for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Similarity::Cosine => "cosine",
            Similarity::ScaledDot => "scaled_dot",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcaOptions {
    pub num_heads: usize,
    pub head_dim: usize,
    /// Logit multiplier; `None` means `1/sqrt(head_dim)`.
    pub logit_scale: Option<f64>,
    pub similarity: Similarity,
    /// Adds the previous centers to each M-step result.
    pub m_step_residual: bool,
    pub activation: Activation,
    /// Hidden width multiplier of the center-init FFN.
    pub ffn_ratio: usize,
}

impl RcaOptions {
    pub fn new(num_heads: usize, head_dim: usize) -> Self {
        RcaOptions {
            num_heads,
            head_dim,
            logit_scale: None,
            similarity: Similarity::Cosine,
            m_step_residual: false,
            activation: Activation::Gelu,
            ffn_ratio: 4,
        }
    }

    pub fn dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn scale(&self) -> f64 {
        self.logit_scale
            .unwrap_or_else(|| 1.0 / (self.head_dim as f64).sqrt())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// Declares `{name}.weight` (`d_in×d_out`) and `{name}.bias` (`d_out`).
    pub fn declare(src: &mut impl ParamSource, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: src.take(format!("{name}.weight"), &[d_in, d_out], Init::TruncNormal(INIT_STD))?,
            bias: src.take(format!("{name}.bias"), &[d_out], Init::Zeros)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: Var,
    pub beta: Var,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn declare(src: &mut impl ParamSource, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: src.take(format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: src.take(format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gamma, self.beta, LN_EPS)
    }
}

/// Two linear layers with an activation between them.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn declare(
        src: &mut impl ParamSource,
        name: &str,
        dim: usize,
        hidden: usize,
        activation: Activation,
    ) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::declare(src, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::declare(src, &format!("{name}.fc2"), hidden, dim)?,
            activation,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = match self.activation {
            Activation::Gelu => g.gelu(h),
            Activation::Identity => h,
        };
        self.fc2.forward(g, h)
    }
}

/// Parameters of one clustering layer.
#[derive(Debug, Clone, Copy)]
pub struct RcaParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub init_ffn: FeedForward,
    pub dispatch_mlp: FeedForward,
    pub opts: RcaOptions,
}

impl RcaParams {
    pub fn declare(src: &mut impl ParamSource, prefix: &str, opts: RcaOptions) -> Result<Self> {
        let d = opts.dim();
        if opts.num_heads == 0 || opts.head_dim == 0 {
            return Err(Error::Config("num_heads and head_dim must be positive".into()));
        }
        Ok(RcaParams {
            query: Linear::declare(src, &format!("{prefix}.query"), d, d)?,
            key: Linear::declare(src, &format!("{prefix}.key"), d, d)?,
            value: Linear::declare(src, &format!("{prefix}.value"), d, d)?,
            init_ffn: FeedForward::declare(
                src,
                &format!("{prefix}.init_ffn"),
                d,
                opts.ffn_ratio * d,
                opts.activation,
            )?,
            dispatch_mlp: FeedForward::declare(
                src,
                &format!("{prefix}.dispatch_mlp"),
                d,
                d,
                opts.activation,
            )?,
            opts,
        })
    }
}

/// Centers and soft assignment produced by one clustering layer.
#[derive(Debug, Clone, Copy)]
pub struct ClusterState {
    /// K×D.
    pub centers: Var,
    /// K×HW, columns sum to one.
    pub assignment: Var,
}

/// Number of projection evaluations performed by a recurrent clustering call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProjectionCounts {
    pub query: usize,
    pub key: usize,
    pub value: usize,
}

/// Pool grid `(kh, kw)` used to seed `k` centers from an `h×w` token grid.
///
/// `kh = round(sqrt(k·h/w))` clamped to `[1, h]`, `kw = ceil(k/kh)`; when
/// `kh·kw > k` the pooled cells are truncated to the first `k`.
pub fn center_grid(k: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    if k == 0 || k > h * w {
        return Err(Error::Config(format!(
            "cannot initialize {k} centers from a {h}×{w} token grid"
        )));
    }
    let mut kh = ((k * h) as f64 / w as f64).sqrt().round() as usize;
    kh = kh.clamp(1, h);
    let mut kw = k.div_ceil(kh);
    if kw > w {
        kw = w;
        kh = k.div_ceil(kw);
    }
    Ok((kh, kw))
}

/// Seeds `k` centers: adaptive average pool of the `h×w×D` grid, flattened,
/// then the init FFN.
pub fn init_centers<F: Real>(g: &mut Graph<F>, grid: Var, k: usize, params: &RcaParams) -> Result<Var> {
    let (h, w, d) = match g.shape(grid) {
        &[h, w, d] => (h, w, d),
        s => {
            return Err(Error::Bounds {
                op: "init_centers",
                msg: format!("expected an h×w×D grid, got {s:?}"),
            })
        }
    };
    let (kh, kw) = center_grid(k, h, w)?;
    let pooled = g.adaptive_avg_pool(grid, kh, kw)?;
    let mut flat = g.reshape(pooled, &[kh * kw, d])?;
    if kh * kw != k {
        flat = g.slice_rows(flat, 0, k)?;
    }
    params.init_ffn.forward(g, flat)
}

/// Contiguous channel partition of `x[n×D]` into `num_heads` blocks.
pub fn multi_head_split<F: Real>(g: &mut Graph<F>, x: Var, num_heads: usize) -> Result<Vec<Var>> {
    let d = g.shape(x)[g.shape(x).len() - 1];
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Config(format!(
            "channel width {d} not divisible into {num_heads} heads"
        )));
    }
    if num_heads == 1 {
        return Ok(vec![x]);
    }
    let hd = d / num_heads;
    (0..num_heads)
        .map(|h| g.slice_cols(x, h * hd, hd))
        .collect()
}

/// Inverse of [`multi_head_split`].
pub fn multi_head_merge<F: Real>(g: &mut Graph<F>, heads: &[Var]) -> Result<Var> {
    if heads.len() == 1 {
        return Ok(heads[0]);
    }
    g.concat_cols(heads)
}

fn check_width<F: Real>(g: &Graph<F>, op: &'static str, x: Var, params: &RcaParams) -> Result<()> {
    let d = params.opts.dim();
    match g.shape(x) {
        &[_, c] if c == d => Ok(()),
        s => Err(Error::shape(op, s, &[0, d])),
    }
}

/// Per-head `softmax_K(Qh · Khᵀ · scale)`.
fn head_assignments<F: Real>(g: &mut Graph<F>, q: Var, k: Var, params: &RcaParams) -> Result<Vec<Var>> {
    let heads = params.opts.num_heads;
    let scale = F::of(params.opts.scale());
    let qs = multi_head_split(g, q, heads)?;
    let ks = multi_head_split(g, k, heads)?;
    let mut out = Vec::with_capacity(heads);
    for (qh, kh) in qs.into_iter().zip(ks) {
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale);
        out.push(g.softmax_axis(logits, 0)?);
    }
    Ok(out)
}

fn mean_over_heads<F: Real>(g: &mut Graph<F>, heads: &[Var]) -> Result<Var> {
    let mut acc = heads[0];
    if heads.len() == 1 {
        return Ok(acc);
    }
    for &h in &heads[1..] {
        acc = g.add(acc, h)?;
    }
    Ok(g.scale(acc, F::of(1.0 / heads.len() as f64)))
}

/// `concat_h(Mh · Vh)`.
fn aggregate_heads<F: Real>(g: &mut Graph<F>, assign: &[Var], v: Var, params: &RcaParams) -> Result<Var> {
    let vs = multi_head_split(g, v, params.opts.num_heads)?;
    let parts = assign
        .iter()
        .zip(vs)
        .map(|(&m, vh)| g.matmul(m, vh))
        .collect::<Result<Vec<_>>>()?;
    multi_head_merge(g, &parts)
}

/// E-step: soft assignment of features to centers (K×HW).
pub fn e_step<F: Real>(g: &mut Graph<F>, centers: Var, features: Var, params: &RcaParams) -> Result<Var> {
    check_width(g, "e_step", centers, params)?;
    check_width(g, "e_step", features, params)?;
    let q = params.query.forward(g, centers)?;
    let k = params.key.forward(g, features)?;
    let heads = head_assignments(g, q, k, params)?;
    mean_over_heads(g, &heads)
}

/// M-step: `assignment · V(features)`, no normalization over HW.
pub fn m_step<F: Real>(g: &mut Graph<F>, assignment: Var, features: Var, params: &RcaParams) -> Result<Var> {
    check_width(g, "m_step", features, params)?;
    let (k, hw) = match g.shape(assignment) {
        &[k, hw] => (k, hw),
        s => return Err(Error::shape("m_step", s, g.shape(features))),
    };
    if hw != g.shape(features)[0] {
        return Err(Error::shape("m_step", &[k, hw], g.shape(features)));
    }
    let v = params.value.forward(g, features)?;
    g.matmul(assignment, v)
}

/// Runs `t` E/M iterations from `init`.
pub fn recurrent_cluster<F: Real>(
    g: &mut Graph<F>,
    features: Var,
    init: Var,
    t: usize,
    params: &RcaParams,
) -> Result<ClusterState> {
    recurrent_cluster_counted(g, features, init, t, params, &mut ProjectionCounts::default())
}

/// [`recurrent_cluster`], tallying projection evaluations into `counts`.
pub fn recurrent_cluster_counted<F: Real>(
    g: &mut Graph<F>,
    features: Var,
    init: Var,
    t: usize,
    params: &RcaParams,
    counts: &mut ProjectionCounts,
) -> Result<ClusterState> {
    if t == 0 {
        return Err(Error::Config("recurrent clustering needs T >= 1".into()));
    }
    check_width(g, "recurrent_cluster", features, params)?;
    check_width(g, "recurrent_cluster", init, params)?;

    let k = params.key.forward(g, features)?;
    counts.key += 1;
    let v = params.value.forward(g, features)?;
    counts.value += 1;

    let mut centers = init;
    let mut assignment = None;
    for _ in 0..t {
        let q = params.query.forward(g, centers)?;
        counts.query += 1;
        let heads = head_assignments(g, q, k, params)?;
        let mut next = aggregate_heads(g, &heads, v, params)?;
        if params.opts.m_step_residual {
            next = g.add(next, centers)?;
        }
        centers = next;
        assignment = Some(heads);
    }
    let heads = assignment.expect("t >= 1");
    let assignment = mean_over_heads(g, &heads)?;
    Ok(ClusterState {
        centers,
        assignment,
    })
}

/// `(1/K)·Σ_k sim(C_k, p_i)·C_k` for every feature row (HW×D).
pub fn dispatch_aggregate<F: Real>(g: &mut Graph<F>, features: Var, centers: Var, params: &RcaParams) -> Result<Var> {
    check_width(g, "dispatch_features", features, params)?;
    check_width(g, "dispatch_features", centers, params)?;
    let k = g.shape(centers)[0];
    let d = g.shape(centers)[1];
    let sim = match params.opts.similarity {
        Similarity::Cosine => {
            let pn = g.normalize_rows(features, COSINE_EPS)?;
            let cn = g.normalize_rows(centers, COSINE_EPS)?;
            let cnt = g.transpose(cn)?;
            g.matmul(pn, cnt)?
        }
        Similarity::ScaledDot => {
            let ct = g.transpose(centers)?;
            let s = g.matmul(features, ct)?;
            g.scale(s, F::of(1.0 / (d as f64).sqrt()))
        }
    };
    let agg = g.matmul(sim, centers)?;
    Ok(g.scale(agg, F::of(1.0 / k as f64)))
}

/// The residual term added to each feature: `MLP(aggregate)`.
pub fn dispatch_update<F: Real>(g: &mut Graph<F>, features: Var, centers: Var, params: &RcaParams) -> Result<Var> {
    let agg = dispatch_aggregate(g, features, centers, params)?;
    params.dispatch_mlp.forward(g, agg)
}

/// `p_i + MLP((1/K)·Σ_k sim(C_k, p_i)·C_k)`.
pub fn dispatch_features<F: Real>(g: &mut Graph<F>, features: Var, centers: Var, params: &RcaParams) -> Result<Var> {
    let upd = dispatch_update(g, features, centers, params)?;
    g.add(features, upd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Standard cross-attention: each center attends over all tokens.
    SoftmaxOverHw,
    /// Clustering view: each token distributes over the centers.
    SoftmaxOverK,
}

/// Single residual cross-attention update `C + softmax(Q·Kᵀ·scale)·V`.
pub fn legacy_cross_attention<F: Real>(
    g: &mut Graph<F>,
    centers: Var,
    features: Var,
    params: &RcaParams,
    mode: AttentionMode,
) -> Result<Var> {
    check_width(g, "legacy_cross_attention", centers, params)?;
    check_width(g, "legacy_cross_attention", features, params)?;
    let q = params.query.forward(g, centers)?;
    let k = params.key.forward(g, features)?;
    let v = params.value.forward(g, features)?;
    let axis = match mode {
        AttentionMode::SoftmaxOverHw => 1,
        AttentionMode::SoftmaxOverK => 0,
    };
    let scale = F::of(params.opts.scale());
    let heads = params.opts.num_heads;
    let qs = multi_head_split(g, q, heads)?;
    let ks = multi_head_split(g, k, heads)?;
    let vs = multi_head_split(g, v, heads)?;
    let mut parts = Vec::with_capacity(heads);
    for ((qh, kh), vh) in qs.into_iter().zip(ks).zip(vs) {
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale);
        let attn = g.softmax_axis(logits, axis)?;
        parts.push(g.matmul(attn, vh)?);
    }
    let upd = multi_head_merge(g, &parts)?;
    g.add(centers, upd)
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use crate::tensor::Tensor;

    fn identity_opts(d: usize) -> RcaOptions {
        let mut o = RcaOptions::new(1, d);
        o.logit_scale = Some(1.0);
        o.activation = Activation::Identity;
        o
    }

    fn setup(d: usize) -> (Graph<f64>, RcaParams) {
        let opts = identity_opts(d);
        let store = identity_store(opts);
        let mut g = Graph::new();
        let p = bind(&mut g, &store, opts);
        (g, p)
    }

    fn c(g: &mut Graph<f64>, rows: &[Vec<f64>]) -> Var {
        g.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn center_grid_factorization() {
        assert_eq!(center_grid(4, 8, 8).unwrap(), (2, 2));
        assert_eq!(center_grid(2, 2, 2).unwrap(), (1, 2));
        assert_eq!(center_grid(100, 56, 56).unwrap(), (10, 10));
        assert_eq!(center_grid(49, 7, 7).unwrap(), (7, 7));
        assert_eq!(center_grid(1, 5, 3).unwrap(), (1, 1));
        // prime K is truncated from a larger grid
        let (kh, kw) = center_grid(5, 8, 8).unwrap();
        assert!(kh * kw >= 5 && kh <= 8 && kw <= 8);
        // wide K on a narrow grid
        let (kh, kw) = center_grid(6, 6, 1).unwrap();
        assert_eq!((kh, kw), (6, 1));
        assert!(center_grid(17, 4, 4).is_err());
        assert!(center_grid(0, 4, 4).is_err());
    }

    #[test]
    fn init_centers_examples() {
        let (mut g, p) = setup(1);
        let grid = g.constant(Tensor::from_f64(&[2, 2, 1], &[1., 2., 3., 4.]).unwrap());
        let c2 = init_centers(&mut g, grid, 2, &p).unwrap();
        assert_eq!(g.value(c2).data(), &[2.0, 3.0]);
        let c1 = init_centers(&mut g, grid, 1, &p).unwrap();
        assert_eq!(g.value(c1).data(), &[2.5]);
        let c4 = init_centers(&mut g, grid, 4, &p).unwrap();
        assert_eq!(g.value(c4).data(), &[1., 2., 3., 4.]);
        assert!(init_centers(&mut g, grid, 5, &p).is_err());
    }

    #[test]
    fn e_step_examples() {
        let (mut g, p) = setup(2);
        let feats = c(&mut g, &[vec![1., 0.], vec![0.3, -2.0]]);

        let one = c(&mut g, &[vec![0.5, 0.7]]);
        let m = e_step(&mut g, one, feats, &p).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 1.0]);

        let twin = c(&mut g, &[vec![0.5, 0.7], vec![0.5, 0.7]]);
        let m = e_step(&mut g, twin, feats, &p).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.5));

        let centers = c(&mut g, &[vec![1., 0.], vec![0., 1.]]);
        let f1 = c(&mut g, &[vec![1., 0.]]);
        let m = e_step(&mut g, centers, f1, &p).unwrap();
        let e = std::f64::consts::E;
        let expected = e / (e + 1.0);
        let v = g.value(m).data();
        assert!((v[0] - expected).abs() < 1e-15 && (v[0] - 0.7311).abs() < 1e-4);
        assert!((v[1] - (1.0 - expected)).abs() < 1e-15);
    }

    #[test]
    fn m_step_examples() {
        let (mut g, p) = setup(2);
        let feats = c(&mut g, &[vec![1., 2.], vec![3., 4.]]);
        let ones = c(&mut g, &[vec![1., 1.]]);
        let m = m_step(&mut g, ones, feats, &p).unwrap();
        assert_eq!(g.value(m).data(), &[4., 6.]);

        let sel = c(&mut g, &[vec![1., 0.], vec![0., 1.]]);
        let m = m_step(&mut g, sel, feats, &p).unwrap();
        assert_eq!(g.value(m), g.value(feats));

        let vals = c(&mut g, &[vec![2., 0.], vec![0., 2.]]);
        let half = c(&mut g, &[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let m = m_step(&mut g, half, vals, &p).unwrap();
        assert_eq!(g.value(m).data(), &[1., 1., 1., 1.]);

        let bad = c(&mut g, &[vec![1., 0., 0.]]);
        assert!(m_step(&mut g, bad, feats, &p).is_err());
    }

    #[test]
    fn recurrent_cluster_rejects_zero_iterations() {
        let (mut g, p) = setup(2);
        let feats = c(&mut g, &[vec![1., 2.]]);
        let init = c(&mut g, &[vec![1., 0.]]);
        assert!(matches!(
            recurrent_cluster(&mut g, feats, init, 0, &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn recurrent_cluster_counts_projections() {
        let (mut g, p) = setup(2);
        let feats = c(&mut g, &[vec![1., 2.], vec![0., 1.], vec![-1., 0.5]]);
        let init = c(&mut g, &[vec![1., 0.], vec![0., 1.]]);
        let mut counts = ProjectionCounts::default();
        recurrent_cluster_counted(&mut g, feats, init, 4, &p, &mut counts).unwrap();
        assert_eq!(
            counts,
            ProjectionCounts {
                query: 4,
                key: 1,
                value: 1
            }
        );
        // the tape agrees with the counter
        let uses = |w: Var| g.consumers(w).len();
        assert_eq!(uses(p.query.weight), 4);
        assert_eq!(uses(p.key.weight), 1);
        assert_eq!(uses(p.value.weight), 1);
    }

    #[test]
    fn m_step_residual_flag_adds_previous_centers() {
        let mut opts = identity_opts(2);
        let store = identity_store(opts);
        let feats_rows = [vec![1., 2.], vec![3., 4.]];
        let init_rows = [vec![0.5, 0.5]];
        let run = |opts: RcaOptions| {
            let mut g = Graph::new();
            let p = bind(&mut g, &store, opts);
            let f = c(&mut g, &feats_rows);
            let i = c(&mut g, &init_rows);
            let s = recurrent_cluster(&mut g, f, i, 1, &p).unwrap();
            g.value(s.centers).clone()
        };
        let plain = run(opts);
        opts.m_step_residual = true;
        let resid = run(opts);
        assert_eq!(plain.data(), &[4., 6.]);
        assert_eq!(resid.data(), &[4.5, 6.5]);
    }

    #[test]
    fn dispatch_examples() {
        let (mut g, p) = setup(2);
        // orthogonal features and centers: sim 0, zero biases
        let f = c(&mut g, &[vec![1., 0.], vec![2., 0.]]);
        let cs = c(&mut g, &[vec![0., 3.]]);
        let out = dispatch_features(&mut g, f, cs, &p).unwrap();
        assert_eq!(g.value(out), g.value(f));

        let f = c(&mut g, &[vec![2., 1.]]);
        let cs = c(&mut g, &[vec![4., 2.]]);
        let out = dispatch_features(&mut g, f, cs, &p).unwrap();
        let v = g.value(out).data();
        assert!((v[0] - 6.0).abs() < 1e-12 && (v[1] - 3.0).abs() < 1e-12);

        let f = c(&mut g, &[vec![1., 0.]]);
        let cs = c(&mut g, &[vec![1., 0.], vec![0., 1.]]);
        let out = dispatch_features(&mut g, f, cs, &p).unwrap();
        assert_eq!(g.value(out).data(), &[1.5, 0.0]);
    }

    #[test]
    fn dispatch_zero_vectors_do_not_error() {
        let (mut g, p) = setup(2);
        let f = c(&mut g, &[vec![0., 0.], vec![1., 1.]]);
        let cs = c(&mut g, &[vec![0., 0.]]);
        let out = dispatch_features(&mut g, f, cs, &p).unwrap();
        assert!(g.value(out).all_finite());
        assert_eq!(g.value(out), g.value(f));
    }

    #[test]
    fn scaled_dot_similarity() {
        let mut opts = identity_opts(2);
        opts.similarity = Similarity::ScaledDot;
        let store = identity_store(opts);
        let mut g = Graph::new();
        let p = bind(&mut g, &store, opts);
        let f = c(&mut g, &[vec![1., 0.]]);
        let cs = c(&mut g, &[vec![2., 0.]]);
        let out = dispatch_features(&mut g, f, cs, &p).unwrap();
        // sim = 2/sqrt(2); aggregate = sqrt(2)·[2, 0]
        let v = g.value(out).data();
        assert!((v[0] - (1.0 + 2.0 * 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn head_split_layout() {
        let mut g = Graph::<f64>::new();
        let x = c(&mut g, &[vec![0., 1., 2., 3.], vec![4., 5., 6., 7.]]);
        let one = multi_head_split(&mut g, x, 1).unwrap();
        assert_eq!(one, vec![x]);
        let two = multi_head_split(&mut g, x, 2).unwrap();
        assert_eq!(g.value(two[0]).data(), &[0., 1., 4., 5.]);
        assert_eq!(g.value(two[1]).data(), &[2., 3., 6., 7.]);
        let merged = multi_head_merge(&mut g, &two).unwrap();
        assert_eq!(g.value(merged), g.value(x));
        assert!(multi_head_split(&mut g, x, 3).is_err());
    }

    #[test]
    fn legacy_attention_singletons() {
        let (mut g, p) = setup(2);
        let cs = c(&mut g, &[vec![1., 0.], vec![0., 1.]]);
        let f = c(&mut g, &[vec![3., 5.]]);
        let out = legacy_cross_attention(&mut g, cs, f, &p, AttentionMode::SoftmaxOverHw).unwrap();
        assert_eq!(g.value(out).data(), &[4., 5., 3., 6.]);

        let c1 = c(&mut g, &[vec![1., 1.]]);
        let f = c(&mut g, &[vec![3., 5.], vec![1., -1.]]);
        let out = legacy_cross_attention(&mut g, c1, f, &p, AttentionMode::SoftmaxOverK).unwrap();
        assert_eq!(g.value(out).data(), &[5., 5.]);
    }

    #[test]
    fn multi_head_assignment_is_head_mean() {
        let mut opts = RcaOptions::new(2, 2);
        opts.activation = Activation::Identity;
        let store = identity_store(opts);
        let mut g = Graph::new();
        let p = bind(&mut g, &store, opts);
        let cs = c(&mut g, &[vec![1., 0., 0., 1.], vec![0., 1., 1., 0.]]);
        let f = c(&mut g, &[vec![1., 0., 1., 0.]]);
        let m = e_step(&mut g, cs, f, &p).unwrap();
        // heads disagree symmetrically, so the mean is uniform
        let v = g.value(m).data();
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 0.5).abs() < 1e-15);
    }
}
