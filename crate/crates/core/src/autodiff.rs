//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted; [`Graph::backward`] walks it in reverse.
//! Gradients accumulate in a fixed order, which makes repeated runs
//! bit-identical.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Real, Tensor};

/// GELU tanh-approximation constant `sqrt(2/pi)`.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// GELU tanh-approximation cubic coefficient.
pub const GELU_CUBIC: f64 = 0.044_715;
/// Flops charged per element for exp-based ops (softmax, cross-entropy, GELU).
pub const EXP_FLOPS: u64 = 8;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn placeholder(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Mul,
    AddRowBias,
    Scale,
    Softmax,
    Gelu,
    LayerNorm,
    AdaptivePool,
    CrossEntropy,
    Sum,
    MeanRows,
    Reshape,
    Gather,
    ConcatCols,
    NormalizeRows,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::Scale => "scale",
            OpKind::Softmax => "softmax_axis",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::AdaptivePool => "adaptive_avg_pool",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Sum => "sum",
            OpKind::MeanRows => "mean_rows",
            OpKind::Reshape => "reshape",
            OpKind::Gather => "gather",
            OpKind::ConcatCols => "concat_cols",
            OpKind::NormalizeRows => "normalize_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub const ALL: [OpKind; 18] = ALL_OPS;
}

const ALL_OPS: [OpKind; 18] = [
    OpKind::Leaf,
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::Add,
    OpKind::Mul,
    OpKind::AddRowBias,
    OpKind::Scale,
    OpKind::Softmax,
    OpKind::Gelu,
    OpKind::LayerNorm,
    OpKind::AdaptivePool,
    OpKind::CrossEntropy,
    OpKind::Sum,
    OpKind::MeanRows,
    OpKind::Reshape,
    OpKind::Gather,
    OpKind::ConcatCols,
    OpKind::NormalizeRows,
];

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, F),
    Softmax {
        x: Var,
        axis: usize,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    AdaptivePool {
        x: Var,
        windows: Vec<PoolWindow>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(Var),
    MeanRows(Var),
    Reshape(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    NormalizeRows {
        x: Var,
        norms: Vec<F>,
        eps: F,
    },
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRowBias(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::Reshape(a) => vec![*a],
            Op::Softmax { x, .. }
            | Op::AdaptivePool { x, .. }
            | Op::Gather { x, .. }
            | Op::NormalizeRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }

    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Gelu(..) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::AdaptivePool { .. } => OpKind::AdaptivePool,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(..) => OpKind::Sum,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Gather { .. } => OpKind::Gather,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
        }
    }
}

/// One output cell of an adaptive pool: half-open row and column ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolWindow {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

/// Window layout used by adaptive average pooling of an `h×w` grid to
/// `out_h×out_w`: `[floor(i·h/out_h), ceil((i+1)·h/out_h))`.
pub fn adaptive_windows(h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<PoolWindow> {
    let span = |i: usize, n: usize, out: usize| (i * n / out, ((i + 1) * n).div_ceil(out));
    let mut windows = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        for j in 0..out_w {
            windows.push(PoolWindow {
                rows: span(i, h, out_h),
                cols: span(j, w, out_w),
            });
        }
    }
    windows
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recording tape of tensor operations.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    flops: u64,
    fault: Option<OpKind>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            flops: 0,
            fault: None,
        }
    }

    /// Flips the sign of the backward rule of `kind`. Used by mutation checks
    /// of the gradient-verification tooling; never set in normal operation.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations performed by the recorded forward ops.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true, 0)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false, 0)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Recorded ops that read `v`, in tape order.
    pub fn consumers(&self, v: Var) -> Vec<(Var, OpKind)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op.inputs().contains(&v))
            .map(|(i, n)| (Var(i), n.op.kind()))
            .collect()
    }

    /// Inputs of the op that produced `v`.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool, flops: u64) -> Var {
        self.flops += flops;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Bounds {
                op,
                msg: format!("expected a matrix, got shape {s:?}"),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(&[a, b]);
        let flops = 2 * (m * k * n) as u64;
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs, flops))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), needs, 0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        let flops = out.len() as u64;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), needs, flops))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        let flops = out.len() as u64;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), needs, flops))
    }

    /// `x[n×d] + bias[d]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims2("add_row_bias", x)?;
        if self.value(bias).len() != d {
            return Err(Error::shape("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let needs = self.needs(&[x, bias]);
        Ok(self.push(
            Tensor::new(&[n, d], out)?,
            Op::AddRowBias(x, bias),
            needs,
            (n * d) as u64,
        ))
    }

    /// `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let out: Vec<F> = self.value(a).data().iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        let flops = out.len() as u64;
        self.push(
            Tensor::new(&shape, out).expect("same shape"),
            Op::Scale(a, factor),
            needs,
            flops,
        )
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "softmax_axis",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut max = F::neg_infinity();
                for j in 0..n {
                    max = max.max(src[base + j * inner]);
                }
                let mut sum = F::zero();
                for j in 0..n {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..n {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        let needs = self.needs(&[x]);
        let flops = EXP_FLOPS * out.len() as u64;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, needs, flops))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<F> = self.value(x).data().iter().map(|&v| gelu_value(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        let flops = EXP_FLOPS * out.len() as u64;
        self.push(Tensor::new(&shape, out).expect("same shape"), Op::Gelu(x), needs, flops)
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d;
        let inv_d = F::of(1.0 / d as f64);
        let mut xhat = vec![F::zero(); src.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + F::of(eps)).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * g[c] + b[c];
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        let flops = 8 * out.len() as u64;
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
            flops,
        ))
    }

    /// Adaptive average pooling of an `h×w×d` grid to `out_h×out_w×d`.
    pub fn adaptive_avg_pool(&mut self, grid: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w, d) = match self.shape(grid) {
            &[h, w, d] => (h, w, d),
            s => {
                return Err(Error::Bounds {
                    op: "adaptive_avg_pool",
                    msg: format!("expected an h×w×d grid, got shape {s:?}"),
                })
            }
        };
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::Bounds {
                op: "adaptive_avg_pool",
                msg: format!("output {out_h}×{out_w} not within input {h}×{w}"),
            });
        }
        let windows = adaptive_windows(h, w, out_h, out_w);
        let src = self.value(grid).data();
        let mut out = vec![F::zero(); out_h * out_w * d];
        for (cell, win) in windows.iter().enumerate() {
            let count = (win.rows.1 - win.rows.0) * (win.cols.1 - win.cols.0);
            let inv = F::of(1.0 / count as f64);
            let dst = &mut out[cell * d..(cell + 1) * d];
            for r in win.rows.0..win.rows.1 {
                for c in win.cols.0..win.cols.1 {
                    let s = &src[(r * w + c) * d..(r * w + c + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(s) {
                        *o = *o + v;
                    }
                }
            }
            for o in dst.iter_mut() {
                *o = *o * inv;
            }
        }
        let needs = self.needs(&[grid]);
        let flops = (h * w * d) as u64;
        Ok(self.push(
            Tensor::new(&[out_h, out_w, d], out)?,
            Op::AdaptivePool { x: grid, windows },
            needs,
            flops,
        ))
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2("cross_entropy", logits)?;
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", &[n, c], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label {
                label: bad,
                classes: c,
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![F::zero(); n * c];
        let mut loss = F::zero();
        for r in 0..n {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[r * c + j] = e;
                sum = sum + e;
            }
            for j in 0..c {
                probs[r * c + j] = probs[r * c + j] / sum;
            }
            loss = loss + (sum.ln() + max - row[labels[r]]);
        }
        loss = loss / F::of(n as f64);
        let needs = self.needs(&[logits]);
        let flops = EXP_FLOPS * (n * c) as u64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
            flops,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let needs = self.needs(&[x]);
        let flops = self.value(x).len() as u64;
        self.push(Tensor::scalar(s), Op::Sum(x), needs, flops)
    }

    /// Mean over the rows of `x[n×d]`, giving `1×d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims2("mean_rows", x)?;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); d];
        for row in src.chunks(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let inv = F::of(1.0 / n as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&[1, d], out)?,
            Op::MeanRows(x),
            needs,
            (n * d) as u64,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), needs, 0))
    }

    /// `out[i] = x[index[i]]` over flat storage, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let len = self.value(x).len();
        if n != index.len() || index.iter().any(|&i| i >= len) {
            return Err(Error::Bounds {
                op: "gather",
                msg: format!("index map of {} entries for shape {shape:?}", index.len()),
            });
        }
        let src = self.value(x).data();
        let out = index.iter().map(|&i| src[i]).collect();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, index }, needs, 0))
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > d {
            return Err(Error::Bounds {
                op: "slice_cols",
                msg: format!("columns {start}..{} of {d}", start + len),
            });
        }
        let index = (0..n)
            .flat_map(|r| (start..start + len).map(move |c| r * d + c))
            .collect();
        self.gather(x, index, &[n, len])
    }

    /// Rows `[start, start+len)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims2("slice_rows", x)?;
        if len == 0 || start + len > n {
            return Err(Error::Bounds {
                op: "slice_rows",
                msg: format!("rows {start}..{} of {n}", start + len),
            });
        }
        self.gather(x, (start * d..(start + len) * d).collect(), &[len, d])
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Bounds {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let (n, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != n {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new(&[n, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
            0,
        ))
    }

    /// Scales each row to unit L2 norm; norms below `eps` are clamped to `eps`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims2("normalize_rows", x)?;
        let eps = F::of(eps);
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![F::zero(); n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            norms.push(norm);
            let denom = norm.max(eps);
            for c in 0..d {
                out[r * d + c] = row[c] / denom;
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&[n, d], out)?,
            Op::NormalizeRows { x, norms, eps },
            needs,
            3 * (n * d) as u64,
        ))
    }

    /// Reverse sweep from a scalar. Gradients accumulate across calls until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                let sign = if self.fault == Some(node.op.kind()) {
                    -F::one()
                } else {
                    F::one()
                };
                self.propagate(idx, &gout, sign, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        if self.grads.len() < grads.len() {
            self.grads.resize_with(grads.len(), || None);
        }
        for (slot, g) in self.grads.iter_mut().zip(grads) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a = *a + v),
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[F], sign: F, grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, contrib: Vec<F>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc
                    .iter_mut()
                    .zip(&contrib)
                    .for_each(|(a, &c)| *a = *a + sign * c),
                slot @ None => {
                    *slot = Some(if sign == F::one() {
                        contrib
                    } else {
                        contrib.into_iter().map(|c| sign * c).collect()
                    })
                }
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2();
                let n = self.nodes[b.0].value.shape()[1];
                let mut ga = vec![F::zero(); m * k];
                gemm_nt_acc(g, val(*b), &mut ga, m, n, k);
                let mut gb = vec![F::zero(); k * n];
                gemm_tn_acc(val(*a), g, &mut gb, k, m, n);
                send(*a, ga);
                send(*b, gb);
            }
            Op::Transpose(a) => {
                let (m, n) = self.nodes[a.0].value.dims2();
                let mut ga = vec![F::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                send(*a, ga);
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect();
                let gb = g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect();
                send(*a, ga);
                send(*b, gb);
            }
            Op::AddRowBias(x, b) => {
                let d = self.nodes[b.0].value.len();
                let mut gb = vec![F::zero(); d];
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                send(*x, g.to_vec());
                send(*b, gb);
            }
            Op::Scale(a, f) => send(*a, g.iter().map(|&v| v * *f).collect()),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = F::zero();
                        for j in 0..n {
                            dot = dot + g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..n {
                            let p = base + j * inner;
                            gx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Gelu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| gv * gelu_derivative(xv))
                    .collect();
                send(*x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = val(*gamma);
                let d = gam.len();
                let mut gx = vec![F::zero(); g.len()];
                let mut gg = vec![F::zero(); d];
                let mut gbeta = vec![F::zero(); d];
                let inv_d = F::of(1.0 / d as f64);
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dy = F::zero();
                    let mut mean_dy_xhat = F::zero();
                    for c in 0..d {
                        let dy = gr[c] * gam[c];
                        mean_dy = mean_dy + dy;
                        mean_dy_xhat = mean_dy_xhat + dy * xr[c];
                        gg[c] = gg[c] + gr[c] * xr[c];
                        gbeta[c] = gbeta[c] + gr[c];
                    }
                    mean_dy = mean_dy * inv_d;
                    mean_dy_xhat = mean_dy_xhat * inv_d;
                    for c in 0..d {
                        let dy = gr[c] * gam[c];
                        gx[r * d + c] = rs * (dy - mean_dy - xr[c] * mean_dy_xhat);
                    }
                }
                send(*x, gx);
                send(*gamma, gg);
                send(*beta, gbeta);
            }
            Op::AdaptivePool { x, windows } => {
                let shape = self.nodes[x.0].value.shape();
                let (w, d) = (shape[1], shape[2]);
                let mut gx = vec![F::zero(); self.nodes[x.0].value.len()];
                for (cell, win) in windows.iter().enumerate() {
                    let count = (win.rows.1 - win.rows.0) * (win.cols.1 - win.cols.0);
                    let inv = F::of(1.0 / count as f64);
                    let gc = &g[cell * d..(cell + 1) * d];
                    for r in win.rows.0..win.rows.1 {
                        for c in win.cols.0..win.cols.1 {
                            let dst = &mut gx[(r * w + c) * d..(r * w + c + 1) * d];
                            dst.iter_mut().zip(gc).for_each(|(a, &v)| *a = *a + v * inv);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = probs.len() / labels.len();
                let scale = g[0] / F::of(labels.len() as f64);
                let mut gx: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * c + l] = gx[r * c + l] - scale;
                }
                send(*logits, gx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.nodes[x.0].value.len()]),
            Op::MeanRows(x) => {
                let (n, d) = self.nodes[x.0].value.dims2();
                let inv = F::of(1.0 / n as f64);
                let mut gx = Vec::with_capacity(n * d);
                for _ in 0..n {
                    gx.extend(g.iter().map(|&v| v * inv));
                }
                send(*x, gx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Gather { x, index } => {
                let mut gx = vec![F::zero(); self.nodes[x.0].value.len()];
                for (&i, &v) in index.iter().zip(g) {
                    gx[i] = gx[i] + v;
                }
                send(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (n, w) = self.nodes[p.0].value.dims2();
                    let mut gp = Vec::with_capacity(n * w);
                    for r in 0..n {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    send(p, gp);
                }
            }
            Op::NormalizeRows { x, norms, eps } => {
                let y = node.value.data();
                let d = y.len() / norms.len();
                let mut gx = vec![F::zero(); y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    if norm > *eps {
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            gx[r * d + c] = (gr[c] - yr[c] * dot) / norm;
                        }
                    } else {
                        for c in 0..d {
                            gx[r * d + c] = gr[c] / *eps;
                        }
                    }
                }
                send(*x, gx);
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn gelu_value<F: Real>(x: F) -> F {
    let c = F::of(GELU_SQRT_2_OVER_PI);
    let a = F::of(GELU_CUBIC);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_derivative<F: Real>(x: F) -> F {
    let c = F::of(GELU_SQRT_2_OVER_PI);
    let a = F::of(GELU_CUBIC);
    let half = F::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    let dinner = c * (F::one() + F::of(3.0) * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}
