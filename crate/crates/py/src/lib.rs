//! Python bindings: model configs, inference, clustering ops and flop tallies.
//!
//! Matrices cross the boundary as lists of rows; images as flat
//! channel-interleaved lists of `image_size² · in_channels` floats in `[0, 1]`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use clusterformer::bench::{self, Mechanism, Point};
use clusterformer::checkpoint::{load_checkpoint, save_checkpoint};
use clusterformer::cluster::{self, RcaOptions, RcaParams};
use clusterformer::gradcheck::Scope;
use clusterformer::model::{self, ModelConfig};
use clusterformer::params::{Layout, ParamStore};
use clusterformer::visualize::final_stage_labels;
use clusterformer::{Graph, Tensor, Var};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<Tensor<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(PyValueError::new_err(format!("{what} must be a non-empty list of rows")));
    }
    Tensor::from_rows(rows).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (r, _) = t.dims2();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

/// Model hyperparameters; `tiny()` for desk-scale, `ModelConfig()` for the
/// four-stage 224² layout.
#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    fn new() -> Self {
        PyModelConfig {
            inner: ModelConfig::default(),
        }
    }

    #[staticmethod]
    fn tiny() -> Self {
        PyModelConfig {
            inner: ModelConfig::tiny(),
        }
    }

    /// Parses `key=value` lines; unlisted keys keep the 224² defaults.
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        let inner = ModelConfig::from_text(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(PyModelConfig { inner })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Returns a copy with one key changed.
    fn with_value(&self, key: &str, value: &str) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        inner.set(key, value).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(PyModelConfig { inner })
    }

    fn param_count(&self) -> PyResult<usize> {
        model::param_count_for(&self.inner).map_err(err)
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    #[getter]
    fn in_channels(&self) -> usize {
        self.inner.in_channels
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn stage_dims(&self) -> Vec<usize> {
        self.inner.stage_dims.clone()
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", self.inner.to_text().trim().replace('\n', ", "))
    }
}

/// Encoder with parameters, evaluated in double precision.
#[pyclass(name = "Model")]
struct PyModel {
    inner: model::Model<f64>,
}

impl PyModel {
    fn image(&self, pixels: Vec<f64>) -> PyResult<Tensor<f64>> {
        let c = &self.inner.config;
        Tensor::new(&[c.image_size, c.image_size, c.in_channels], pixels).map_err(err)
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed=None))]
    fn new(config: &PyModelConfig, seed: Option<u64>) -> PyResult<Self> {
        let cfg = &config.inner;
        cfg.validate().map_err(err)?;
        let inner = model::init_params(cfg, seed.unwrap_or(cfg.seed)).map_err(err)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_checkpoint(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config.clone(),
        }
    }

    fn param_count(&self) -> usize {
        model::param_count(&self.inner)
    }

    fn logits(&self, py: Python<'_>, image: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = self.image(image)?;
        py.detach(|| self.inner.logits(&x)).map_err(err)
    }

    fn predict(&self, py: Python<'_>, image: Vec<f64>) -> PyResult<usize> {
        let logits = self.logits(py, image)?;
        Ok((0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b }))
    }

    /// Cross-entropy loss of one labelled image.
    fn loss(&self, py: Python<'_>, image: Vec<f64>, label: usize) -> PyResult<f64> {
        if label >= self.inner.config.num_classes {
            return Err(PyValueError::new_err(format!("label {label} out of range")));
        }
        let x = self.image(image)?;
        py.detach(|| self.inner.loss_and_grads(&x, label, 1.0))
            .map(|(loss, _, _)| loss)
            .map_err(err)
    }

    /// Hard final-stage cluster ids as `(rows, cols, labels)`.
    fn cluster_labels(&self, py: Python<'_>, image: Vec<f64>) -> PyResult<(usize, usize, Vec<usize>)> {
        let x = self.image(image)?;
        let map = py.detach(|| final_stage_labels(&self.inner, &x)).map_err(err)?;
        Ok((map.rows, map.cols, map.labels))
    }

    /// Floating-point operations of one forward pass.
    fn forward_flops(&self, py: Python<'_>, image: Vec<f64>) -> PyResult<u64> {
        let x = self.image(image)?;
        py.detach(|| self.inner.forward(&x)).map(|(g, _)| g.flops()).map_err(err)
    }
}

/// One clustering layer with randomly initialized projections.
#[pyclass(name = "ClusterLayer")]
struct PyClusterLayer {
    opts: RcaOptions,
    store: ParamStore<f64>,
}

const PREFIX: &str = "rca";

impl PyClusterLayer {
    /// Builds a graph holding the frozen layer and the given constants.
    fn eval<R>(
        &self,
        inputs: Vec<Tensor<f64>>,
        f: impl FnOnce(&mut Graph<f64>, &RcaParams, &[Var]) -> clusterformer::Result<R>,
    ) -> PyResult<(Graph<f64>, R)> {
        let mut g = Graph::new();
        let params = {
            let mut b = self.store.binder(&mut g).frozen();
            RcaParams::declare(&mut b, PREFIX, self.opts).map_err(err)?
        };
        let vars: Vec<Var> = inputs.into_iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &params, &vars).map_err(err)?;
        Ok((g, out))
    }
}

#[pymethods]
impl PyClusterLayer {
    #[new]
    #[pyo3(signature = (dim, num_heads=1, seed=0, similarity="cosine", activation="gelu", m_step_residual=false))]
    fn new(
        dim: usize,
        num_heads: usize,
        seed: u64,
        similarity: &str,
        activation: &str,
        m_step_residual: bool,
    ) -> PyResult<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(PyValueError::new_err(format!(
                "dim {dim} is not divisible into {num_heads} heads"
            )));
        }
        let mut opts = RcaOptions::new(num_heads, dim / num_heads);
        opts.similarity = similarity.parse().map_err(err)?;
        opts.activation = activation.parse().map_err(err)?;
        opts.m_step_residual = m_step_residual;
        let mut layout = Layout::default();
        RcaParams::declare(&mut layout, PREFIX, opts).map_err(err)?;
        Ok(PyClusterLayer {
            opts,
            store: ParamStore::init(&layout, seed),
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.opts.dim()
    }

    fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Soft assignment `K×HW` of features to centers; columns sum to one.
    fn e_step(&self, centers: Vec<Vec<f64>>, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let c = matrix(&centers, "centers")?;
        let p = matrix(&features, "features")?;
        let (g, out) = self.eval(vec![c, p], |g, prm, v| cluster::e_step(g, v[0], v[1], prm))?;
        Ok(rows(g.value(out)))
    }

    /// New centers `assignment · V(features)`.
    fn m_step(&self, assignment: Vec<Vec<f64>>, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let a = matrix(&assignment, "assignment")?;
        let p = matrix(&features, "features")?;
        let (g, out) = self.eval(vec![a, p], |g, prm, v| cluster::m_step(g, v[0], v[1], prm))?;
        Ok(rows(g.value(out)))
    }

    /// `iterations` E/M rounds from `init`; returns `(centers, assignment)`.
    fn cluster(
        &self,
        features: Vec<Vec<f64>>,
        init: Vec<Vec<f64>>,
        iterations: usize,
    ) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let p = matrix(&features, "features")?;
        let c = matrix(&init, "init")?;
        let (g, st) = self.eval(vec![p, c], |g, prm, v| {
            cluster::recurrent_cluster(g, v[0], v[1], iterations, prm)
        })?;
        Ok((rows(g.value(st.centers)), rows(g.value(st.assignment))))
    }

    /// Features updated from the centers they resemble.
    fn dispatch(&self, features: Vec<Vec<f64>>, centers: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let p = matrix(&features, "features")?;
        let c = matrix(&centers, "centers")?;
        let (g, out) = self.eval(vec![p, c], |g, prm, v| cluster::dispatch_features(g, v[0], v[1], prm))?;
        Ok(rows(g.value(out)))
    }

    /// Seeds `k` centers from features laid out on an `h×w` grid (row-major).
    fn init_centers(&self, features: Vec<Vec<f64>>, h: usize, w: usize, k: usize) -> PyResult<Vec<Vec<f64>>> {
        let p = matrix(&features, "features")?;
        let (n, d) = p.dims2();
        if n != h * w {
            return Err(PyValueError::new_err(format!("{n} features do not fill a {h}x{w} grid")));
        }
        let grid = p.reshaped(&[h, w, d]).map_err(err)?;
        let (g, out) = self.eval(vec![grid], |g, prm, v| cluster::init_centers(g, v[0], k, prm))?;
        Ok(rows(g.value(out)))
    }
}

fn point(mechanism: &str, hw: usize, k: usize, d: usize, t: usize) -> PyResult<Point> {
    let mechanism: Mechanism = mechanism.parse().map_err(err)?;
    Ok(Point { mechanism, hw, k, d, t })
}

/// Closed-form flop tally split into projection and mixing terms.
#[pyfunction]
#[pyo3(signature = (mechanism, hw, k=8, d=16, t=3))]
fn analytic_flops<'py>(
    py: Python<'py>,
    mechanism: &str,
    hw: usize,
    k: usize,
    d: usize,
    t: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let b = bench::analytic_flops(point(mechanism, hw, k, d, t)?);
    let dict = PyDict::new(py);
    dict.set_item("kv_projection", b.kv_projection)?;
    dict.set_item("q_projection", b.q_projection)?;
    dict.set_item("mixing", b.mixing)?;
    dict.set_item("total", b.total())?;
    Ok(dict)
}

/// Flops counted by actually running one mixing layer.
#[pyfunction]
#[pyo3(signature = (mechanism, hw, k=8, d=16, t=3))]
fn counted_flops(py: Python<'_>, mechanism: &str, hw: usize, k: usize, d: usize, t: usize) -> PyResult<u64> {
    let p = point(mechanism, hw, k, d, t)?;
    py.detach(|| bench::counted_flops::<f64>(p)).map_err(err)
}

/// Runs the finite-difference suite; returns `(name, max_rel_err, passed)`.
#[pyfunction]
#[pyo3(signature = (scope="ops"))]
fn gradcheck(py: Python<'_>, scope: &str) -> PyResult<Vec<(String, f64, bool)>> {
    let scope: Scope = scope.parse().map_err(err)?;
    let reports = py.detach(|| clusterformer::gradcheck::run(scope, None)).map_err(err)?;
    Ok(reports
        .iter()
        .map(|r| (r.op.clone(), r.max_rel_err(), r.passed()))
        .collect())
}

#[pymodule]
fn clusterformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyClusterLayer>()?;
    m.add_function(wrap_pyfunction!(analytic_flops, m)?)?;
    m.add_function(wrap_pyfunction!(counted_flops, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
