//! Gradient-check suites over every differentiable op and the tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, OpKind, Var};
use crate::cluster::{
    dispatch_features, e_step, init_centers, legacy_cross_attention, m_step, recurrent_cluster,
    Activation, AttentionMode, RcaOptions, RcaParams, Similarity,
};
use crate::error::{Error, Result};
use crate::model::{model_forward, ModelConfig, ModelVars};
use crate::oracle::{grad_check, random_projection, random_tensor, GradCheck, GradReport};
use crate::params::{Init, Layout, ParamSource, ParamStore};
use crate::tensor::Tensor;

/// Relative tolerance for single ops and clustering kernels.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative tolerance for the end-to-end model.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Fraction of each model parameter array sampled by the model check.
pub const MODEL_SAMPLE_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Model,
    All,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "model" => Ok(Scope::Model),
            "all" => Ok(Scope::All),
            other => Err(Error::Config(format!("unknown gradcheck scope '{other}'"))),
        }
    }
}

/// Hands out pre-bound vars in declaration order.
struct Replay<'a> {
    vars: std::slice::Iter<'a, Var>,
}

impl ParamSource for Replay<'_> {
    fn take(&mut self, name: String, _shape: &[usize], _init: Init) -> Result<Var> {
        self.vars
            .next()
            .copied()
            .ok_or_else(|| Error::Config(format!("no input left for '{name}'")))
    }
}

fn named(items: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn rca_inputs(rng: &mut ChaCha8Rng, opts: RcaOptions) -> (Layout, Vec<(String, Tensor<f64>)>) {
    let mut layout = Layout::default();
    RcaParams::declare(&mut layout, "rca", opts).expect("valid options");
    let params = layout
        .specs
        .iter()
        .map(|s| (s.name.clone(), random_tensor(rng, &s.shape, -0.6, 0.6)))
        .collect();
    (layout, params)
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<(String, Tensor<f64>)>,
    build: Builder,
}

fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    random_projection(g, out, 17)
}

fn op_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut r = |shape: &[usize], lo: f64, hi: f64| random_tensor(&mut rng, shape, lo, hi);
    let mut cases = vec![
        Case {
            name: "matmul",
            inputs: named(vec![("a", r(&[3, 4], -1.0, 1.0)), ("b", r(&[4, 2], -1.0, 1.0))]),
            build: Box::new(|g, v| {
                let o = g.matmul(v[0], v[1])?;
                project(g, o)
            }),
        },
        Case {
            name: "transpose",
            inputs: named(vec![("x", r(&[3, 2], -1.0, 1.0))]),
            build: Box::new(|g, v| {
                let o = g.transpose(v[0])?;
                project(g, o)
            }),
        },
        Case {
            name: "add",
            inputs: named(vec![("a", r(&[2, 3], -1.0, 1.0)), ("b", r(&[2, 3], -1.0, 1.0))]),
            build: Box::new(|g, v| {
                let o = g.add(v[0], v[1])?;
                project(g, o)
            }),
        },
        Case {
            name: "mul",
            inputs: named(vec![("a", r(&[2, 3], -1.0, 1.0)), ("b", r(&[2, 3], -1.0, 1.0))]),
            build: Box::new(|g, v| {
                let o = g.mul(v[0], v[1])?;
                project(g, o)
            }),
        },
        Case {
            name: "scale",
            inputs: named(vec![("x", r(&[2, 3], -1.0, 1.0))]),
            build: Box::new(|g, v| {
                let o = g.scale(v[0], 0.37);
                project(g, o)
            }),
        },
        Case {
            name: "linear",
            inputs: named(vec![
                ("x", r(&[3, 4], -1.0, 1.0)),
                ("w", r(&[4, 2], -1.0, 1.0)),
                ("b", r(&[2], -1.0, 1.0)),
            ]),
            build: Box::new(|g, v| {
                let o = g.linear(v[0], v[1], v[2])?;
                project(g, o)
            }),
        },
        Case {
            name: "softmax_axis(0)",
            inputs: named(vec![("x", r(&[3, 4], -3.0, 3.0))]),
            build: Box::new(|g, v| {
                let o = g.softmax_axis(v[0], 0)?;
                project(g, o)
            }),
        },
        Case {
            name: "softmax_axis(1)",
            inputs: named(vec![("x", r(&[3, 4], -3.0, 3.0))]),
            build: Box::new(|g, v| {
                let o = g.softmax_axis(v[0], 1)?;
                project(g, o)
            }),
        },
        Case {
            name: "gelu",
            inputs: named(vec![("x", r(&[2, 5], -3.0, 3.0))]),
            build: Box::new(|g, v| {
                let o = g.gelu(v[0]);
                project(g, o)
            }),
        },
        Case {
            name: "layer_norm",
            inputs: named(vec![
                ("x", r(&[3, 5], -2.0, 2.0)),
                ("gamma", r(&[5], 0.5, 1.5)),
                ("beta", r(&[5], -0.5, 0.5)),
            ]),
            build: Box::new(|g, v| {
                let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(g, o)
            }),
        },
        Case {
            name: "adaptive_avg_pool",
            inputs: named(vec![("grid", r(&[5, 4, 2], -1.0, 1.0))]),
            build: Box::new(|g, v| {
                let o = g.adaptive_avg_pool(v[0], 3, 2)?;
                project(g, o)
            }),
        },
        Case {
            name: "cross_entropy",
            inputs: named(vec![("logits", r(&[4, 3], -2.0, 2.0))]),
            build: Box::new(|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2])),
        },
        Case {
            name: "sum",
            inputs: named(vec![("x", r(&[2, 2], -1.0, 1.0))]),
            build: Box::new(|g, v| Ok(g.sum(v[0]))),
        },
        Case {
            name: "mean_rows",
            inputs: named(vec![("x", r(&[4, 3], -1.0, 1.0))]),
            build: Box::new(|g, v| {
                let o = g.mean_rows(v[0])?;
                project(g, o)
            }),
        },
        Case {
            name: "slice_and_concat",
            inputs: named(vec![("x", r(&[3, 4], -1.0, 1.0))]),
            build: Box::new(|g, v| {
                let a = g.slice_cols(v[0], 0, 1)?;
                let b = g.slice_cols(v[0], 1, 3)?;
                let o = g.concat_cols(&[b, a])?;
                let o = g.slice_rows(o, 1, 2)?;
                project(g, o)
            }),
        },
        Case {
            name: "normalize_rows",
            inputs: named(vec![("x", r(&[3, 4], -1.0, 1.0))]),
            build: Box::new(|g, v| {
                let o = g.normalize_rows(v[0], 1e-12)?;
                project(g, o)
            }),
        },
        Case {
            name: "sum_of_squares(x·W)",
            inputs: named(vec![("x", r(&[3, 4], -1.0, 1.0)), ("w", r(&[4, 3], -1.0, 1.0))]),
            build: Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            }),
        },
    ];
    cases.extend(cluster_cases());
    cases
}

fn cluster_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut out = Vec::new();

    let mut mk = |name: &'static str,
                  opts: RcaOptions,
                  data: Vec<(&str, Tensor<f64>)>,
                  f: fn(&mut Graph<f64>, &[Var], &RcaParams) -> Result<Var>| {
        let (_, params) = rca_inputs(&mut rng, opts);
        let n_data = data.len();
        let mut inputs = named(data);
        inputs.extend(params);
        out.push(Case {
            name,
            inputs,
            build: Box::new(move |g, v| {
                let mut src = Replay {
                    vars: v[n_data..].iter(),
                };
                let p = RcaParams::declare(&mut src, "rca", opts)?;
                let o = f(g, &v[..n_data], &p)?;
                project(g, o)
            }),
        });
    };

    let mut data_rng = ChaCha8Rng::seed_from_u64(5);
    let mut r = |shape: &[usize]| random_tensor(&mut data_rng, shape, -1.0, 1.0);

    let two_heads = RcaOptions::new(2, 3);
    mk(
        "e_step",
        two_heads,
        vec![("centers", r(&[3, 6])), ("features", r(&[5, 6]))],
        |g, v, p| e_step(g, v[0], v[1], p),
    );
    mk(
        "m_step",
        two_heads,
        vec![("assignment", r(&[3, 5])), ("features", r(&[5, 6]))],
        |g, v, p| m_step(g, v[0], v[1], p),
    );
    mk(
        "recurrent_cluster(T=3)",
        two_heads,
        vec![("features", r(&[6, 6])), ("init", r(&[3, 6]))],
        |g, v, p| {
            let s = recurrent_cluster(g, v[0], v[1], 3, p)?;
            let sum = g.concat_cols(&[s.centers, s.assignment])?;
            Ok(sum)
        },
    );
    let mut resid = two_heads;
    resid.m_step_residual = true;
    mk(
        "recurrent_cluster(T=2,residual)",
        resid,
        vec![("features", r(&[6, 6])), ("init", r(&[3, 6]))],
        |g, v, p| Ok(recurrent_cluster(g, v[0], v[1], 2, p)?.centers),
    );
    mk(
        "init_centers",
        RcaOptions::new(1, 4),
        vec![("grid", r(&[3, 4, 4]))],
        |g, v, p| init_centers(g, v[0], 3, p),
    );
    mk(
        "dispatch_features(cosine)",
        two_heads,
        vec![("features", r(&[5, 6])), ("centers", r(&[3, 6]))],
        |g, v, p| dispatch_features(g, v[0], v[1], p),
    );
    let mut dot = two_heads;
    dot.similarity = Similarity::ScaledDot;
    dot.activation = Activation::Identity;
    mk(
        "dispatch_features(dot)",
        dot,
        vec![("features", r(&[5, 6])), ("centers", r(&[3, 6]))],
        |g, v, p| dispatch_features(g, v[0], v[1], p),
    );
    mk(
        "legacy_attention(HW)",
        two_heads,
        vec![("centers", r(&[3, 6])), ("features", r(&[5, 6]))],
        |g, v, p| legacy_cross_attention(g, v[0], v[1], p, AttentionMode::SoftmaxOverHw),
    );
    mk(
        "legacy_attention(K)",
        two_heads,
        vec![("centers", r(&[3, 6])), ("features", r(&[5, 6]))],
        |g, v, p| legacy_cross_attention(g, v[0], v[1], p, AttentionMode::SoftmaxOverK),
    );
    mk(
        "cluster+dispatch(T=3)",
        two_heads,
        vec![("features", r(&[6, 6])), ("init", r(&[2, 6]))],
        |g, v, p| {
            let s = recurrent_cluster(g, v[0], v[1], 3, p)?;
            dispatch_features(g, v[0], s.centers, p)
        },
    );
    out
}

/// Runs the op-level suite. `fault` flips one backward rule (mutation check).
pub fn op_suite(fault: Option<OpKind>) -> Result<Vec<GradReport>> {
    let settings = GradCheck::new(OP_TOLERANCE).with_fault(fault);
    op_cases()
        .into_iter()
        .map(|c| grad_check(c.name, &c.inputs, &settings, c.build))
        .collect()
}

/// Parameters of the tiny model, perturbed away from the initializer so that
/// biases, norm gains and weights all carry non-trivial gradients.
pub fn perturbed_tiny_model(seed: u64) -> Result<(ModelConfig, ParamStore<f64>)> {
    let config = ModelConfig::tiny();
    let layout = config.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = ParamStore::from_layout_with(&layout, |spec| {
        let n = spec.numel();
        let base = match spec.init {
            Init::Ones => 1.0,
            _ => 0.0,
        };
        let data = (0..n).map(|_| base + rng.random_range(-0.3..0.3)).collect();
        Tensor::new(&spec.shape, data).expect("layout shape")
    });
    Ok((config, store))
}

/// Cross-entropy of the tiny model w.r.t. a sample of every parameter array.
pub fn model_suite(fault: Option<OpKind>) -> Result<Vec<GradReport>> {
    let (config, store) = perturbed_tiny_model(11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = config.image_size;
    let image = random_tensor(&mut rng, &[s, s, config.in_channels], 0.0, 1.0);
    let settings = GradCheck::new(MODEL_TOLERANCE)
        .sample(MODEL_SAMPLE_FRACTION, 13)
        .with_fault(fault);
    let inputs = store.entries().to_vec();
    let cfg = config.clone();
    let report = grad_check("model(tiny)", &inputs, &settings, move |g, v| {
        let mut src = Replay { vars: v.iter() };
        let vars = ModelVars::declare(&mut src, &cfg)?;
        let x = g.constant(image.clone());
        let out = model_forward(g, x, &vars, &cfg)?;
        g.cross_entropy(out.logits, &[1])
    })?;
    Ok(vec![report])
}

pub fn run(scope: Scope, fault: Option<OpKind>) -> Result<Vec<GradReport>> {
    let mut reports = Vec::new();
    if matches!(scope, Scope::Ops | Scope::All) {
        reports.extend(op_suite(fault)?);
    }
    if matches!(scope, Scope::Model | Scope::All) {
        reports.extend(model_suite(fault)?);
    }
    Ok(reports)
}
