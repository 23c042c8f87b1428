//! Cost measurement for recurrent clustering versus full self-attention.
//!
//! Every sample carries an analytic flop tally (checked against the graph's
//! own op-level counter) and a median wall time.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Graph, EXP_FLOPS};
use crate::cluster::{recurrent_cluster, Linear, RcaOptions, RcaParams};
use crate::error::{Error, Result};
use crate::params::{Init, Layout, ParamSource};
use crate::tensor::{Real, Tensor};
use crate::Var;

pub const CSV_HEADER: &str = "mechanism,HW,K,D,T,flops,time_ns_median,time_ns_iqr";
/// Interquartile range above this fraction of the median marks a sample unstable.
pub const UNSTABLE_IQR_RATIO: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    SelfAttention,
    Rca,
}

impl Mechanism {
    pub const ALL: [Mechanism; 2] = [Mechanism::Rca, Mechanism::SelfAttention];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::SelfAttention => "self_attention",
            Mechanism::Rca => "rca",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self_attention" | "sa" => Ok(Mechanism::SelfAttention),
            "rca" => Ok(Mechanism::Rca),
            other => Err(Error::Config(format!("unknown mechanism '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Point {
    pub mechanism: Mechanism,
    pub hw: usize,
    pub k: usize,
    pub d: usize,
    pub t: usize,
}

/// Analytic flop tally split by where the work happens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    /// Key and value projections of the feature map.
    pub kv_projection: u64,
    /// Query projections (of centers for rca, of features for self-attention).
    pub q_projection: u64,
    /// Logits, normalization and aggregation — the token-mixing term.
    pub mixing: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.kv_projection + self.q_projection + self.mixing
    }
}

/// Multiply-adds count as 2, softmax as [`EXP_FLOPS`] per element, bias adds
/// and scaling as 1 per element.
pub fn analytic_flops(p: Point) -> FlopBreakdown {
    let (n, k, d, t) = (p.hw as u64, p.k as u64, p.d as u64, p.t as u64);
    let proj = |rows: u64| 2 * rows * d * d + rows * d;
    match p.mechanism {
        Mechanism::Rca => FlopBreakdown {
            kv_projection: 2 * proj(n),
            q_projection: t * proj(k),
            // Q·Kᵀ, scale, softmax over K, M·V
            mixing: t * (2 * k * d * n + k * n + EXP_FLOPS * k * n + 2 * k * n * d),
        },
        Mechanism::SelfAttention => FlopBreakdown {
            kv_projection: 2 * proj(n),
            q_projection: proj(n),
            mixing: 2 * n * n * d + n * n + EXP_FLOPS * n * n + 2 * n * n * d,
        },
    }
}

/// Binds pre-generated parameter values as constants, in declaration order.
struct Constants<'a, F: Real> {
    graph: &'a mut Graph<F>,
    values: std::slice::Iter<'a, Tensor<F>>,
}

impl<F: Real> ParamSource for Constants<'_, F> {
    fn take(&mut self, name: String, _shape: &[usize], _init: Init) -> Result<Var> {
        let t = self
            .values
            .next()
            .ok_or_else(|| Error::Config(format!("no value for '{name}'")))?;
        Ok(self.graph.constant(t.clone()))
    }
}

fn random_input<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<F> {
    let dist = Uniform::new(-1.0, 1.0).expect("valid range");
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| F::of(dist.sample(rng))).collect()).expect("positive extents")
}

/// Inputs for one measurement, generated once outside the timed region.
struct Workload<F: Real> {
    point: Point,
    features: Tensor<F>,
    centers: Tensor<F>,
    params: Vec<Tensor<F>>,
}

impl<F: Real> Workload<F> {
    fn new(point: Point, seed: u64) -> Result<Self> {
        if point.hw == 0 || point.k == 0 || point.d == 0 || point.t == 0 {
            return Err(Error::Config(format!("bench point has a zero extent: {point:?}")));
        }
        let mut layout = Layout::default();
        match point.mechanism {
            Mechanism::Rca => {
                RcaParams::declare(&mut layout, "bench", RcaOptions::new(1, point.d))?;
            }
            Mechanism::SelfAttention => {
                for name in ["q", "k", "v"] {
                    Linear::declare(&mut layout, name, point.d, point.d)?;
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .specs
            .iter()
            .map(|s| random_input(&mut rng, &s.shape))
            .collect();
        Ok(Workload {
            point,
            features: random_input(&mut rng, &[point.hw, point.d]),
            centers: random_input(&mut rng, &[point.k, point.d]),
            params,
        })
    }

    /// One forward evaluation; returns the graph's flop counter.
    fn run(&self) -> Result<u64> {
        let mut g = Graph::new();
        let x = g.constant(self.features.clone());
        let p = self.point;
        match p.mechanism {
            Mechanism::Rca => {
                let c0 = g.constant(self.centers.clone());
                let mut src = Constants {
                    graph: &mut g,
                    values: self.params.iter(),
                };
                let params = RcaParams::declare(&mut src, "bench", RcaOptions::new(1, p.d))?;
                let before = g.flops();
                recurrent_cluster(&mut g, x, c0, p.t, &params)?;
                Ok(g.flops() - before)
            }
            Mechanism::SelfAttention => {
                let mut src = Constants {
                    graph: &mut g,
                    values: self.params.iter(),
                };
                let wq = Linear::declare(&mut src, "q", p.d, p.d)?;
                let wk = Linear::declare(&mut src, "k", p.d, p.d)?;
                let wv = Linear::declare(&mut src, "v", p.d, p.d)?;
                let before = g.flops();
                self_attention(&mut g, x, &wq, &wk, &wv)?;
                Ok(g.flops() - before)
            }
        }
    }
}

/// Single-head `softmax(Q·Kᵀ/√D)·V` over all token pairs.
pub fn self_attention<F: Real>(g: &mut Graph<F>, x: Var, wq: &Linear, wk: &Linear, wv: &Linear) -> Result<Var> {
    let d = g.shape(x)[1];
    let q = wq.forward(g, x)?;
    let k = wk.forward(g, x)?;
    let v = wv.forward(g, x)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, F::of(1.0 / (d as f64).sqrt()));
    let attn = g.softmax_axis(logits, 1)?;
    g.matmul(attn, v)
}

/// Flop counter of one real evaluation at `p` (used to cross-check the tally).
pub fn counted_flops<F: Real>(p: Point) -> Result<u64> {
    Workload::<F>::new(p, 0)?.run()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingOptions {
    pub warmup: usize,
    pub runs: usize,
    /// Each timed run repeats the workload until at least this long.
    pub min_run_ns: u64,
    pub seed: u64,
}

impl Default for TimingOptions {
    fn default() -> Self {
        TimingOptions {
            warmup: 1,
            runs: 5,
            min_run_ns: 2_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostSample {
    pub point: Point,
    pub flops: u64,
    pub time_ns_median: f64,
    pub time_ns_iqr: f64,
}

impl CostSample {
    pub fn breakdown(&self) -> FlopBreakdown {
        analytic_flops(self.point)
    }

    pub fn unstable(&self) -> bool {
        self.time_ns_iqr > UNSTABLE_IQR_RATIO * self.time_ns_median
    }

    pub fn csv_row(&self) -> String {
        let p = self.point;
        format!(
            "{},{},{},{},{},{},{:.0},{:.0}",
            p.mechanism, p.hw, p.k, p.d, p.t, self.flops, self.time_ns_median, self.time_ns_iqr
        )
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn measure_cost<F: Real>(point: Point, opts: &TimingOptions) -> Result<CostSample> {
    if opts.runs < 5 {
        return Err(Error::Config(format!("need at least 5 timed runs, got {}", opts.runs)));
    }
    let work = Workload::<F>::new(point, opts.seed)?;
    let flops = analytic_flops(point).total();

    let mut single_ns = u64::MAX;
    for _ in 0..opts.warmup.max(1) {
        let start = Instant::now();
        let counted = work.run()?;
        single_ns = single_ns.min(start.elapsed().as_nanos() as u64);
        debug_assert_eq!(counted, flops, "analytic tally drifted from the graph counter");
    }
    let reps = opts.min_run_ns.div_ceil(single_ns.max(1)).max(1);

    let mut times = Vec::with_capacity(opts.runs);
    for _ in 0..opts.runs {
        let start = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(work.run()?);
        }
        times.push(start.elapsed().as_nanos() as f64 / reps as f64);
    }
    times.sort_by(f64::total_cmp);
    let sample = CostSample {
        point,
        flops,
        time_ns_median: quantile(&times, 0.5),
        time_ns_iqr: quantile(&times, 0.75) - quantile(&times, 0.25),
    };
    if sample.unstable() {
        log::warn!(
            "unstable timing for {}: iqr {:.0}ns vs median {:.0}ns",
            sample.csv_row(),
            sample.time_ns_iqr,
            sample.time_ns_median
        );
    }
    Ok(sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Hw,
    K,
    T,
}

impl Axis {
    fn of(self, p: &Point) -> usize {
        match self {
            Axis::Hw => p.hw,
            Axis::K => p.k,
            Axis::T => p.t,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Hw => "HW",
            Axis::K => "K",
            Axis::T => "T",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hw" => Ok(Axis::Hw),
            "k" => Ok(Axis::K),
            "t" => Ok(Axis::T),
            other => Err(Error::Config(format!("unknown scaling axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFit {
    pub mechanism: Mechanism,
    pub axis: Axis,
    pub points: usize,
    /// Least-squares log-log slope of median wall time.
    pub time_slope: f64,
    /// Log-log slope of the token-mixing flop tally.
    pub flop_slope: f64,
}

impl fmt::Display for ScalingFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "exponent mechanism={} axis={} points={} time_slope={:.4} flop_slope={:.4}",
            self.mechanism,
            self.axis.name(),
            self.points,
            self.time_slope,
            self.flop_slope
        )
    }
}

fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Fits the scaling exponent along `axis`. All samples must share one
/// mechanism and differ only along `axis`.
pub fn fit_scaling(samples: &[CostSample], axis: Axis) -> Result<ScalingFit> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("no samples to fit".into()))?;
    let mechanism = first.point.mechanism;
    if samples.iter().any(|s| s.point.mechanism != mechanism) {
        return Err(Error::Config("samples mix mechanisms".into()));
    }
    let mut values: Vec<usize> = samples.iter().map(|s| axis.of(&s.point)).collect();
    values.sort_unstable();
    values.dedup();
    if values.len() < 4 {
        return Err(Error::Config(format!(
            "need at least 4 distinct {} values, got {}",
            axis.name(),
            values.len()
        )));
    }
    let (lo, hi) = (values[0], values[values.len() - 1]);
    if hi < 8 * lo {
        return Err(Error::Config(format!(
            "{} range {lo}..{hi} spans less than 8x",
            axis.name()
        )));
    }
    let xs: Vec<f64> = samples.iter().map(|s| (axis.of(&s.point) as f64).ln()).collect();
    let times: Vec<f64> = samples.iter().map(|s| s.time_ns_median.max(1.0).ln()).collect();
    let mixing: Vec<f64> = samples
        .iter()
        .map(|s| (s.breakdown().mixing as f64).ln())
        .collect();
    Ok(ScalingFit {
        mechanism,
        axis,
        points: samples.len(),
        time_slope: ls_slope(&xs, &times),
        flop_slope: ls_slope(&xs, &mixing),
    })
}

/// Grid of benchmark points: the cartesian product of every listed value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sweep {
    pub mechanisms: Vec<Mechanism>,
    pub hw: Vec<usize>,
    pub k: Vec<usize>,
    pub d: Vec<usize>,
    pub t: Vec<usize>,
}

impl Default for Sweep {
    fn default() -> Self {
        Sweep {
            mechanisms: Mechanism::ALL.to_vec(),
            hw: vec![256, 512, 1024, 2048, 4096],
            k: vec![8],
            d: vec![16],
            t: vec![3],
        }
    }
}

impl Sweep {
    /// Parses `key=v1,v2;key=…` overriding the defaults, e.g.
    /// `mech=rca;hw=256,1024;k=8;d=16;t=1,3`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut sweep = Sweep::default();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, vals) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("sweep entry '{part}' is not key=values")))?;
            let vals: Vec<&str> = vals.split(',').map(str::trim).collect();
            let nums = || -> Result<Vec<usize>> {
                vals.iter()
                    .map(|v| match v.parse::<usize>() {
                        Ok(n) if n > 0 => Ok(n),
                        _ => Err(Error::Config(format!("bad sweep value '{v}' for {key}"))),
                    })
                    .collect()
            };
            match key.trim().to_ascii_lowercase().as_str() {
                "mech" | "mechanism" => {
                    sweep.mechanisms = vals.iter().map(|v| v.parse()).collect::<Result<_>>()?
                }
                "hw" => sweep.hw = nums()?,
                "k" => sweep.k = nums()?,
                "d" => sweep.d = nums()?,
                "t" => sweep.t = nums()?,
                other => return Err(Error::Config(format!("unknown sweep key '{other}'"))),
            }
        }
        Ok(sweep)
    }

    pub fn points(&self) -> Vec<Point> {
        let mut out = Vec::new();
        for &mechanism in &self.mechanisms {
            for &hw in &self.hw {
                for &k in &self.k {
                    for &d in &self.d {
                        for &t in &self.t {
                            out.push(Point { mechanism, hw, k, d, t });
                        }
                    }
                }
            }
        }
        out
    }

    /// Axes with at least two distinct values.
    pub fn varying_axes(&self) -> Vec<Axis> {
        let mut axes = Vec::new();
        if self.hw.len() > 1 {
            axes.push(Axis::Hw);
        }
        if self.k.len() > 1 {
            axes.push(Axis::K);
        }
        if self.t.len() > 1 {
            axes.push(Axis::T);
        }
        axes
    }
}

pub fn to_csv(samples: &[CostSample]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for sample in samples {
        s.push_str(&sample.csv_row());
        s.push('\n');
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<CostSample>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Config("bench CSV is missing its header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Config(format!("malformed bench row '{line}'"));
            if f.len() != 8 {
                return Err(bad());
            }
            let u = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
            let point = Point {
                mechanism: f[0].parse()?,
                hw: u(1)?,
                k: u(2)?,
                d: u(3)?,
                t: u(4)?,
            };
            Ok(CostSample {
                point,
                flops: f[5].parse().map_err(|_| bad())?,
                time_ns_median: f[6].parse().map_err(|_| bad())?,
                time_ns_iqr: f[7].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Groups samples by mechanism and fits each varying axis.
pub fn summarize(samples: &[CostSample], axes: &[Axis]) -> Vec<ScalingFit> {
    let mut fits = Vec::new();
    for mech in Mechanism::ALL {
        let group: Vec<CostSample> = samples
            .iter()
            .filter(|s| s.point.mechanism == mech)
            .cloned()
            .collect();
        for &axis in axes {
            if let Ok(fit) = fit_scaling(&group, axis) {
                fits.push(fit);
            }
        }
    }
    fits
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(mechanism: Mechanism, hw: usize, k: usize, d: usize, t: usize) -> Point {
        Point { mechanism, hw, k, d, t }
    }

    #[test]
    fn tally_matches_graph_counter() {
        for p in [
            pt(Mechanism::Rca, 64, 8, 16, 3),
            pt(Mechanism::Rca, 10, 3, 4, 1),
            pt(Mechanism::SelfAttention, 64, 8, 16, 3),
            pt(Mechanism::SelfAttention, 7, 1, 5, 1),
        ] {
            assert_eq!(counted_flops::<f32>(p).unwrap(), analytic_flops(p).total(), "{p:?}");
        }
    }

    #[test]
    fn rca_tally_monotone_in_each_axis() {
        let base = pt(Mechanism::Rca, 64, 8, 16, 3);
        let f = |p| analytic_flops(p).total();
        assert!(f(pt(Mechanism::Rca, 64, 8, 16, 4)) > f(base));
        assert!(f(pt(Mechanism::Rca, 64, 9, 16, 3)) > f(base));
        assert!(f(pt(Mechanism::Rca, 65, 8, 16, 3)) > f(base));
        assert!(f(pt(Mechanism::Rca, 64, 8, 17, 3)) > f(base));
    }

    #[test]
    fn only_query_work_scales_with_t() {
        let t1 = analytic_flops(pt(Mechanism::Rca, 64, 8, 16, 1));
        let t3 = analytic_flops(pt(Mechanism::Rca, 64, 8, 16, 3));
        assert_eq!(t3.kv_projection, t1.kv_projection);
        assert_eq!(t3.q_projection + t3.mixing, 3 * (t1.q_projection + t1.mixing));
    }

    #[test]
    fn self_attention_mixing_quadruples() {
        let a = analytic_flops(pt(Mechanism::SelfAttention, 64, 8, 16, 3)).mixing;
        let b = analytic_flops(pt(Mechanism::SelfAttention, 128, 8, 16, 3)).mixing;
        assert_eq!(b, 4 * a);
    }

    #[test]
    fn rca_cheaper_when_tk_below_hw() {
        for hw in [32, 64, 256] {
            for (t, k) in [(1, 4), (3, 8), (2, 15)] {
                if t * k < hw {
                    let r = analytic_flops(pt(Mechanism::Rca, hw, k, 16, t)).total();
                    let s = analytic_flops(pt(Mechanism::SelfAttention, hw, k, 16, t)).total();
                    assert!(r < s, "hw={hw} t={t} k={k}");
                }
            }
        }
    }

    fn synthetic(mech: Mechanism, hws: &[usize], power: f64) -> Vec<CostSample> {
        hws.iter()
            .map(|&hw| {
                let point = pt(mech, hw, 8, 16, 3);
                CostSample {
                    point,
                    flops: analytic_flops(point).total(),
                    time_ns_median: 3.0 * (hw as f64).powf(power),
                    time_ns_iqr: 0.0,
                }
            })
            .collect()
    }

    #[test]
    fn exact_flop_slopes() {
        let hws = [256, 512, 1024, 2048, 4096];
        let r = fit_scaling(&synthetic(Mechanism::Rca, &hws, 1.0), Axis::Hw).unwrap();
        assert!((r.flop_slope - 1.0).abs() < 1e-12);
        assert!((r.time_slope - 1.0).abs() < 1e-12);
        let s = fit_scaling(&synthetic(Mechanism::SelfAttention, &hws, 2.0), Axis::Hw).unwrap();
        assert!((s.flop_slope - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fit_requires_enough_range() {
        assert!(fit_scaling(&synthetic(Mechanism::Rca, &[256, 512, 1024], 1.0), Axis::Hw).is_err());
        assert!(fit_scaling(&synthetic(Mechanism::Rca, &[256, 300, 400, 500], 1.0), Axis::Hw).is_err());
        assert!(fit_scaling(&[], Axis::Hw).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let samples = synthetic(Mechanism::Rca, &[16, 32], 1.0);
        let text = to_csv(&samples);
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(parse_csv(&text).unwrap(), samples);
        assert!(parse_csv("nope\n").is_err());
    }

    #[test]
    fn sweep_parsing() {
        let s = Sweep::parse("mech=rca;hw=64;k=4;d=8;t=1").unwrap();
        assert_eq!(s.points(), vec![pt(Mechanism::Rca, 64, 4, 8, 1)]);
        let s = Sweep::parse("hw=16,32,64").unwrap();
        assert_eq!(s.points().len(), 2 * 3);
        assert_eq!(s.varying_axes(), vec![Axis::Hw]);
        assert!(Sweep::parse("hw=0").is_err());
        assert!(Sweep::parse("q=1").is_err());
    }

    #[test]
    fn measure_small_point() {
        let opts = TimingOptions {
            min_run_ns: 100_000,
            ..TimingOptions::default()
        };
        let s = measure_cost::<f32>(pt(Mechanism::Rca, 32, 4, 8, 2), &opts).unwrap();
        assert!(s.flops > 0 && s.time_ns_median > 0.0);
        assert!(s.time_ns_iqr >= 0.0);
    }
}
