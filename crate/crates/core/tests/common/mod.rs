//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::Rng;

use clusterformer::cluster::{self, ClusterState, RcaOptions, RcaParams};
use clusterformer::oracle::Matrix;
use clusterformer::params::{Layout, ParamStore};
use clusterformer::{Graph, Tensor};

pub const PREFIX: &str = "rca";

/// A clustering layer with non-trivial weights plus one input instance.
pub struct Case {
    pub opts: RcaOptions,
    pub store: ParamStore<f64>,
    pub features: Tensor<f64>,
    pub init: Tensor<f64>,
}

impl Case {
    pub fn k(&self) -> usize {
        self.init.shape()[0]
    }

    pub fn hw(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.opts.dim()
    }
}

pub fn layout(opts: RcaOptions) -> Layout {
    let mut l = Layout::default();
    RcaParams::declare(&mut l, PREFIX, opts).unwrap();
    l
}

/// Weights uniform in `[-w, w]`, everything else too, so that assignments are
/// far from uniform and every term matters.
pub fn random_store(rng: &mut impl Rng, opts: RcaOptions, w: f64) -> ParamStore<f64> {
    ParamStore::from_layout_with(&layout(opts), |spec| {
        let data = (0..spec.numel()).map(|_| rng.random_range(-w..w)).collect();
        Tensor::new(&spec.shape, data).unwrap()
    })
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random case with `K ≤ max_k`, `HW ≤ max_hw`, `D ≤ max_d` (D split over 1, 2 or 4 heads).
pub fn random_case(rng: &mut impl Rng, max_k: usize, max_hw: usize, max_d: usize) -> Case {
    let heads = [1, 2, 4][rng.random_range(0..3)].min(max_d);
    let head_dim = rng.random_range(1..=max_d / heads);
    let mut opts = RcaOptions::new(heads, head_dim);
    opts.m_step_residual = rng.random_bool(0.25);
    let d = opts.dim();
    let k = rng.random_range(1..=max_k);
    let hw = rng.random_range(1..=max_hw);
    Case {
        opts,
        store: random_store(rng, opts, 0.5),
        features: random_tensor(rng, &[hw, d], -1.0, 1.0),
        init: random_tensor(rng, &[k, d], -1.0, 1.0),
    }
}

pub fn bind(g: &mut Graph<f64>, case: &Case) -> RcaParams {
    let mut b = case.store.binder(g).frozen();
    RcaParams::declare(&mut b, PREFIX, case.opts).unwrap()
}

/// Runs `t` clustering iterations; returns `(centers, assignment)`.
pub fn run_cluster(case: &Case, features: &Tensor<f64>, init: &Tensor<f64>, t: usize) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let params = bind(&mut g, case);
    let p = g.constant(features.clone());
    let c = g.constant(init.clone());
    let ClusterState { centers, assignment } = cluster::recurrent_cluster(&mut g, p, c, t, &params).unwrap();
    (g.value(centers).clone(), g.value(assignment).clone())
}

pub fn run_dispatch(case: &Case, features: &Tensor<f64>, centers: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let params = bind(&mut g, case);
    let p = g.constant(features.clone());
    let c = g.constant(centers.clone());
    let out = cluster::dispatch_features(&mut g, p, c, &params).unwrap();
    g.value(out).clone()
}

pub fn to_matrix(t: &Tensor<f64>) -> Matrix {
    let (r, _) = t.dims2();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_abs_diff_matrix(t: &Tensor<f64>, m: &Matrix) -> f64 {
    let (r, c) = t.dims2();
    assert_eq!((r, c), (m.len(), m.first().map_or(0, Vec::len)));
    let mut worst = 0.0f64;
    for i in 0..r {
        for j in 0..c {
            worst = worst.max((t.at2(i, j) - m[i][j]).abs());
        }
    }
    worst
}

/// Largest `|Σ_k a[k][j] − 1|` over columns.
pub fn column_sum_error(a: &Tensor<f64>) -> f64 {
    let (k, hw) = a.dims2();
    (0..hw)
        .map(|j| ((0..k).map(|i| a.at2(i, j)).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Column permutation: `out[:, j] = a[:, perm[j]]`.
pub fn permute_cols(a: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (r, c) = a.dims2();
    let data = (0..r)
        .flat_map(|i| perm.iter().map(move |&p| a.at2(i, p)))
        .collect::<Vec<_>>();
    Tensor::new(&[r, c], data).unwrap()
}

pub fn shuffled(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
