//! Brute-force references and numeric gradient checking.
//!
//! Nothing here reuses the graph kernels: the clustering oracle is written
//! with plain nested loops over `Vec<Vec<f64>>`, and the finite-difference
//! checker only needs a scalar function.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, OpKind, Var};
use crate::cluster::RcaOptions;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub type Matrix = Vec<Vec<f64>>;

/// Default central-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Floor applied to the denominator of relative errors so that coordinates
/// with vanishing gradients are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Clustering weights as plain matrices.
#[derive(Debug, Clone)]
pub struct RawRca {
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub num_heads: usize,
    pub scale: f64,
    pub m_step_residual: bool,
}

fn to_matrix(t: &Tensor<f64>) -> Matrix {
    let (r, c) = t.dims2();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

impl RawRca {
    /// Reads `{prefix}.{query,key,value}.{weight,bias}` from `store`.
    pub fn from_store(store: &ParamStore<f64>, prefix: &str, opts: &RcaOptions) -> Result<Self> {
        let get = |n: &str| {
            store
                .get(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::Config(format!("missing '{prefix}.{n}'")))
        };
        Ok(RawRca {
            wq: to_matrix(get("query.weight")?),
            bq: get("query.bias")?.data().to_vec(),
            wk: to_matrix(get("key.weight")?),
            bk: get("key.bias")?.data().to_vec(),
            wv: to_matrix(get("value.weight")?),
            bv: get("value.bias")?.data().to_vec(),
            num_heads: opts.num_heads,
            scale: opts.scale(),
            m_step_residual: opts.m_step_residual,
        })
    }
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| {
                    let mut s = b[j];
                    for (i, &xv) in row.iter().enumerate() {
                        s += xv * w[i][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// One E-step and one M-step from already-projected keys and values.
fn em_from_projections(q: &Matrix, keys: &Matrix, vals: &Matrix, raw: &RawRca) -> (Matrix, Matrix) {
    let k = q.len();
    let hw = keys.len();
    let d = q[0].len();
    let hd = d / raw.num_heads;
    let mut mean_assign = vec![vec![0.0; hw]; k];
    let mut centers = vec![vec![0.0; d]; k];
    for h in 0..raw.num_heads {
        let cols = h * hd..(h + 1) * hd;
        let mut a = vec![vec![0.0; hw]; k];
        for j in 0..hw {
            let logits: Vec<f64> = (0..k)
                .map(|i| {
                    let dot: f64 = cols.clone().map(|c| q[i][c] * keys[j][c]).sum();
                    dot * raw.scale
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for i in 0..k {
                a[i][j] = exps[i] / z;
            }
        }
        for i in 0..k {
            for j in 0..hw {
                mean_assign[i][j] += a[i][j] / raw.num_heads as f64;
                for c in cols.clone() {
                    centers[i][c] += a[i][j] * vals[j][c];
                }
            }
        }
    }
    (mean_assign, centers)
}

/// Dense single E/M step: returns `(assignment K×HW, new centers K×D)`.
pub fn oracle_rca_step(features: &Matrix, centers: &Matrix, raw: &RawRca) -> (Matrix, Matrix) {
    let q = affine(centers, &raw.wq, &raw.bq);
    let keys = affine(features, &raw.wk, &raw.bk);
    let vals = affine(features, &raw.wv, &raw.bv);
    let (a, mut c) = em_from_projections(&q, &keys, &vals, raw);
    if raw.m_step_residual {
        add_in_place(&mut c, centers);
    }
    (a, c)
}

/// `t` oracle iterations, projecting keys and values once.
pub fn oracle_recurrent(features: &Matrix, init: &Matrix, t: usize, raw: &RawRca) -> (Matrix, Matrix) {
    let keys = affine(features, &raw.wk, &raw.bk);
    let vals = affine(features, &raw.wv, &raw.bv);
    let mut centers = init.clone();
    let mut assign = Vec::new();
    for _ in 0..t {
        let q = affine(&centers, &raw.wq, &raw.bq);
        let (a, mut c) = em_from_projections(&q, &keys, &vals, raw);
        if raw.m_step_residual {
            add_in_place(&mut c, &centers);
        }
        centers = c;
        assign = a;
    }
    (assign, centers)
}

fn add_in_place(acc: &mut Matrix, other: &Matrix) {
    for (ra, rb) in acc.iter_mut().zip(other) {
        for (a, b) in ra.iter_mut().zip(rb) {
            *a += b;
        }
    }
}

/// Central differences of a scalar function, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {eps}")));
    }
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {f0}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        grad.data_mut()[i] = central_difference(&f, &mut probe, i, eps)?;
    }
    Ok(grad)
}

fn central_difference(f: &impl Fn(&Tensor<f64>) -> f64, probe: &mut Tensor<f64>, i: usize, eps: f64) -> Result<f64> {
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + eps;
    let fp = f(probe);
    probe.data_mut()[i] = orig - eps;
    let fm = f(probe);
    probe.data_mut()[i] = orig;
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::NonFinite(format!("f near coordinate {i}")));
    }
    Ok((fp - fm) / (2.0 * eps))
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub name: String,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn mean_rel_err(&self) -> f64 {
        let n: usize = self.inputs.iter().map(|r| r.checked).sum();
        let s: f64 = self
            .inputs
            .iter()
            .map(|r| r.mean_rel_err * r.checked as f64)
            .sum();
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Worst `(input name, flat index)`.
    pub fn worst(&self) -> Option<(&str, usize)> {
        self.inputs
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .map(|r| (r.name.as_str(), r.worst_index))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }

    pub const CSV_HEADER: &'static str = "op,max_rel_err,mean_rel_err,worst_input,worst_index,tolerance,pass";

    pub fn csv_row(&self) -> String {
        let (wn, wi) = self.worst().unwrap_or(("", 0));
        format!(
            "{},{:.6e},{:.6e},{},{},{:e},{}",
            self.op,
            self.max_rel_err(),
            self.mean_rel_err(),
            wn,
            wi,
            self.tolerance,
            self.passed()
        )
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (wn, wi) = self.worst().unwrap_or(("-", 0));
        write!(
            f,
            "{:<24} max_rel_err={:.3e} mean_rel_err={:.3e} worst={}[{}] tol={:.0e} {}",
            self.op,
            self.max_rel_err(),
            self.mean_rel_err(),
            wn,
            wi,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub tolerance: f64,
    pub eps: f64,
    /// Fraction of coordinates per input to check (1.0 = all).
    pub fraction: f64,
    pub seed: u64,
    pub fault: Option<OpKind>,
}

impl GradCheck {
    pub fn new(tolerance: f64) -> Self {
        GradCheck {
            tolerance,
            eps: FD_EPS,
            fraction: 1.0,
            seed: 0,
            fault: None,
        }
    }

    pub fn sample(mut self, fraction: f64, seed: u64) -> Self {
        self.fraction = fraction;
        self.seed = seed;
        self
    }

    pub fn with_fault(mut self, fault: Option<OpKind>) -> Self {
        self.fault = fault;
        self
    }
}

/// Compares backward gradients of the scalar built by `build` against
/// central differences, for every named input.
///
/// `build` receives a fresh double-precision graph and the inputs bound as
/// trainable leaves, and must return a scalar.
pub fn grad_check<B>(op: &str, inputs: &[(String, Tensor<f64>)], settings: &GradCheck, build: B) -> Result<GradReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        g.inject_fault(settings.fault);
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let y = g.value(out).data()[0];
        if g.value(out).len() != 1 {
            return Err(Error::NonScalar(g.shape(out).to_vec()));
        }
        let mut grads = Vec::new();
        if with_grad {
            g.backward(out)?;
            grads = vars
                .iter()
                .zip(values)
                .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
                .collect();
        }
        Ok((y, grads))
    };

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (y0, analytic) = eval(&values, true)?;
    if !y0.is_finite() {
        return Err(Error::NonFinite(format!("{op}: output {y0}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, (name, t)) in inputs.iter().enumerate() {
        let n = t.len();
        let coords: Vec<usize> = if settings.fraction >= 1.0 {
            (0..n).collect()
        } else {
            let m = ((n as f64 * settings.fraction).ceil() as usize).clamp(1, n);
            let mut c = sample(&mut rng, n, m).into_vec();
            c.sort_unstable();
            c
        };
        let mut max_err = 0.0f64;
        let mut sum_err = 0.0;
        let mut worst = coords.first().copied().unwrap_or(0);
        for &i in &coords {
            let orig = values[idx].data()[i];
            values[idx].data_mut()[i] = orig + settings.eps;
            let (fp, _) = eval(&values, false)?;
            values[idx].data_mut()[i] = orig - settings.eps;
            let (fm, _) = eval(&values, false)?;
            values[idx].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * settings.eps);
            let err = relative_error(analytic[idx][i], numeric);
            sum_err += err;
            if err > max_err || !err.is_finite() {
                max_err = if err.is_finite() { err } else { f64::INFINITY };
                worst = i;
            }
        }
        reports.push(InputReport {
            name: name.clone(),
            max_rel_err: max_err,
            mean_rel_err: if coords.is_empty() { 0.0 } else { sum_err / coords.len() as f64 },
            worst_index: worst,
            checked: coords.len(),
        });
    }
    Ok(GradReport {
        op: op.to_string(),
        tolerance: settings.tolerance,
        inputs: reports,
    })
}

/// Reduces a tensor to a scalar through fixed random weights, so every output
/// coordinate influences the checked gradient.
pub fn random_projection(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wv = g.constant(Tensor::new(&shape, w)?);
    let prod = g.mul(out, wv)?;
    Ok(g.sum(prod))
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_examples() {
        let x = Tensor::from_f64(&[1], &[3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, FD_EPS).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);

        let x = Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap();
        let g = finite_diff_grad(|_| 4.2, &x, FD_EPS).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));

        assert!(finite_diff_grad(|_| f64::NAN, &x, FD_EPS).is_err());
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
    }

    #[test]
    fn report_pass_iff_within_tolerance() {
        let mk = |err: f64| GradReport {
            op: "x".into(),
            tolerance: 1e-4,
            inputs: vec![InputReport {
                name: "a".into(),
                max_rel_err: err,
                mean_rel_err: err / 2.0,
                worst_index: 3,
                checked: 4,
            }],
        };
        assert!(mk(1e-4).passed());
        assert!(!mk(1.1e-4).passed());
        let row = mk(1e-5).csv_row();
        assert_eq!(row.split(',').count(), GradReport::CSV_HEADER.split(',').count());
        assert!(mk(1e-5).to_string().contains("PASS"));
    }

    #[test]
    fn oracle_singleton_and_symmetry() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let raw = RawRca {
            wq: eye.clone(),
            bq: vec![0.0; 2],
            wk: eye.clone(),
            bk: vec![0.0; 2],
            wv: eye,
            bv: vec![0.0; 2],
            num_heads: 1,
            scale: 1.0,
            m_step_residual: false,
        };
        let feats = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 3.0]];
        let (a, c) = oracle_rca_step(&feats, &vec![vec![0.3, 0.1]], &raw);
        assert!(a[0].iter().all(|&v| v == 1.0));
        assert_eq!(c[0], vec![0.0, 5.5]);

        let twin = vec![vec![0.3, 0.1], vec![0.3, 0.1]];
        let (a, _) = oracle_rca_step(&feats, &twin, &raw);
        assert!(a.iter().flatten().all(|&v| v == 0.5));
    }
}
