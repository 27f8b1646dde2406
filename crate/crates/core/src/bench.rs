//! Cost accounting and wall-clock scaling of the sequence mixers.
//!
//! Three mixers are compared: the chunked SSD kernel, its quadratic
//! entry-by-entry counterpart and a single-head causal softmax attention
//! layer. Multiplication counts are given in closed form and checked against
//! [`Counted`], a scalar that tallies every product and quotient it takes part
//! in. Timings are reported as medians and summarised by log-log slopes.

use std::cell::Cell;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::matmul;
use crate::real::Real;
use crate::ssd::kernels::{axpy, dot};
use crate::ssd::{ssd_chunked, ssd_naive, ssd_recurrent, SsdDims, SsdTensorBundle, NAIVE_LIMIT};
use crate::tensor::Tensor;

thread_local! {
    static PRODUCTS: Cell<u64> = const { Cell::new(0) };
}

/// `f64` that counts multiplications and divisions on the current thread.
///
/// Additions and transcendental calls are free.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
pub struct Counted(pub f64);

#[inline]
fn tick() {
    PRODUCTS.with(|c| c.set(c.get() + 1));
}

/// Runs `f` with a fresh counter and returns its result with the tally.
pub fn count_products<R>(f: impl FnOnce() -> R) -> (R, u64) {
    PRODUCTS.with(|c| c.set(0));
    let out = f();
    (out, PRODUCTS.with(Cell::get))
}

impl fmt::Display for Counted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl Add for Counted {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Counted(self.0 + o.0)
    }
}

impl Sub for Counted {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Counted(self.0 - o.0)
    }
}

impl Mul for Counted {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        tick();
        Counted(self.0 * o.0)
    }
}

impl Div for Counted {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        tick();
        Counted(self.0 / o.0)
    }
}

impl Neg for Counted {
    type Output = Self;
    fn neg(self) -> Self {
        Counted(-self.0)
    }
}

impl AddAssign for Counted {
    fn add_assign(&mut self, o: Self) {
        self.0 += o.0;
    }
}

impl SubAssign for Counted {
    fn sub_assign(&mut self, o: Self) {
        self.0 -= o.0;
    }
}

impl MulAssign for Counted {
    fn mul_assign(&mut self, o: Self) {
        tick();
        self.0 *= o.0;
    }
}

impl DivAssign for Counted {
    fn div_assign(&mut self, o: Self) {
        tick();
        self.0 /= o.0;
    }
}

impl Sum for Counted {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        Counted(iter.map(|c| c.0).sum())
    }
}

impl Real for Counted {
    const NAME: &'static str = "counted";
    const EPSILON: f64 = f64::EPSILON;

    fn from_f64(v: f64) -> Self {
        Counted(v)
    }
    fn to_f64(self) -> f64 {
        self.0
    }
    fn exp(self) -> Self {
        Counted(self.0.exp())
    }
    fn ln(self) -> Self {
        Counted(self.0.ln())
    }
    fn sqrt(self) -> Self {
        Counted(self.0.sqrt())
    }
    fn tanh(self) -> Self {
        Counted(self.0.tanh())
    }
    fn erf(self) -> Self {
        Counted(libm::erf(self.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchKernel {
    SsdChunked,
    SsdNaive,
    AttentionBaseline,
}

impl BenchKernel {
    pub const ALL: [BenchKernel; 3] = [BenchKernel::SsdChunked, BenchKernel::SsdNaive, BenchKernel::AttentionBaseline];

    pub fn name(self) -> &'static str {
        match self {
            BenchKernel::SsdChunked => "ssd_chunked",
            BenchKernel::SsdNaive => "ssd_naive",
            BenchKernel::AttentionBaseline => "attention_baseline",
        }
    }
}

impl fmt::Display for BenchKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssd_chunked" | "chunked" => Ok(BenchKernel::SsdChunked),
            "ssd_naive" | "naive" => Ok(BenchKernel::SsdNaive),
            "attention_baseline" | "attention" => Ok(BenchKernel::AttentionBaseline),
            other => Err(Error::Parameter(format!(
                "unknown kernel '{other}' (expected ssd_chunked, ssd_naive or attention_baseline)"
            ))),
        }
    }
}

/// Problem size for one benchmark point. `dim` is the attention width and is
/// ignored by the SSD kernels; `heads`, `head_dim` and `chunk` are ignored by
/// attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixerShape {
    pub len: usize,
    pub state: usize,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub chunk: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopTerm {
    pub name: String,
    pub count: u64,
}

/// Multiplication count split into the terms of the loop nest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEstimate {
    pub terms: Vec<FlopTerm>,
}

impl FlopEstimate {
    pub fn total(&self) -> u64 {
        self.terms.iter().map(|t| t.count).sum()
    }

    pub fn term(&self, name: &str) -> Option<u64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.count)
    }

    fn push(&mut self, name: &str, count: u64) {
        self.terms.push(FlopTerm {
            name: name.to_string(),
            count,
        });
    }
}

fn tri(q: u64) -> u64 {
    q * (q + 1) / 2
}

/// Closed-form multiplication count of one forward pass over a single
/// sequence of `shape.len` positions.
///
/// ssd_naive, per causal pair `(j, i)`: one `N`-dot for `C_j·B_i`, then per
/// head two products for the weight, `P` for the update and one for the
/// running decay.
///
/// ssd_chunked, with blocks of length `q` (the last may be shorter):
/// * `N·q(q+1)/2` per block for the intra-block `C·B` table;
/// * `H·(P+3)·q(q+1)/2` per block for the masked weighted sums;
/// * `H` per position for the block-prefix decay;
/// * `H·(2 + N·(P+1))` per position to fold the block into the state;
/// * `H·N·(P+1)` per position outside the first block to read the carried
///   state;
/// * `H·N·P` per block after the first to decay the carried state.
///
/// attention_baseline, width `D`: one division for `1/√D`, `3·T·D²` for the
/// projections,
/// `D + 1` per causal pair for the scaled score, `D` per pair for the value
/// accumulation and `D + 1` per row for normalization.
pub fn flops_estimate(kernel: BenchKernel, shape: MixerShape) -> FlopEstimate {
    let t = shape.len as u64;
    let n = shape.state as u64;
    let d = shape.dim as u64;
    let h = shape.heads as u64;
    let p = shape.head_dim as u64;
    let mut est = FlopEstimate { terms: Vec::new() };
    match kernel {
        BenchKernel::SsdNaive => {
            est.push("pair C·B products", n * tri(t));
            est.push("pair weighted sums", h * (p + 3) * tri(t));
        }
        BenchKernel::SsdChunked => {
            let q = shape.chunk.max(1) as u64;
            let full = t / q;
            let tail = t % q;
            let blocks = full + u64::from(tail > 0);
            let pairs = full * tri(q) + tri(tail);
            let first = t.min(q);
            est.push("block C·B products", n * pairs);
            est.push("block weighted sums", h * (p + 3) * pairs);
            est.push("block decay prefix", h * t);
            est.push("state update", h * t * (2 + n * (p + 1)));
            est.push("carried-state readout", h * (t - first) * n * (p + 1));
            est.push("carried-state decay", h * blocks.saturating_sub(1) * n * p);
        }
        BenchKernel::AttentionBaseline => {
            est.push("score scale", 1);
            est.push("projections", 3 * t * d * d);
            est.push("scores", tri(t) * (d + 1));
            est.push("value mixing", tri(t) * d);
            est.push("normalization", t * (d + 1));
        }
    }
    est
}

/// Analytic working-set size in scalars. The SSD kernels hold their inputs,
/// output, one `N×P` state per head and, for the chunked form, a `Q×Q` table;
/// the quadratic forms are charged for a materialized `T×T` mixing matrix
/// (per head for SSD).
pub fn memory_estimate(kernel: BenchKernel, shape: MixerShape) -> u64 {
    let t = shape.len as u64;
    let n = shape.state as u64;
    let d = shape.dim as u64;
    let h = shape.heads as u64;
    let p = shape.head_dim as u64;
    let q = shape.chunk.max(1) as u64;
    let io = t * (2 * h * p + 2 * n + 2 * h);
    match kernel {
        BenchKernel::SsdChunked => io + h * n * p + q * q,
        BenchKernel::SsdNaive => io + h * t * t,
        BenchKernel::AttentionBaseline => 5 * t * d + t * t,
    }
}

/// Query, key and value maps of the attention baseline, each `[D, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<F: Real = f32> {
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
}

impl<F: Real> AttentionParams<F> {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (dim.max(1) as f64).sqrt();
        AttentionParams {
            wq: Tensor::randn([dim, dim], std, rng),
            wk: Tensor::randn([dim, dim], std, rng),
            wv: Tensor::randn([dim, dim], std, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }
}

/// Single-head causal softmax attention, streamed one query row at a time.
pub fn attention_baseline_mixer<F: Real>(x: &Tensor<F>, params: &AttentionParams<F>) -> Result<Tensor<F>> {
    let (t, d) = x.dims2("attention_baseline_mixer")?;
    for w in [&params.wq, &params.wk, &params.wv] {
        if w.shape() != [d, d] {
            return Err(Error::dim(
                "attention_baseline_mixer",
                format!("weights must be [{d},{d}], got {:?}", w.shape()),
            ));
        }
    }
    let q = matmul(x, &params.wq)?;
    let k = matmul(x, &params.wk)?;
    let v = matmul(x, &params.wv)?;
    let (q, k, v) = (q.data(), k.data(), v.data());
    let scale = F::one() / F::from_f64(d as f64).sqrt();
    let mut out = vec![F::zero(); t * d];
    let mut scores = vec![F::zero(); t];
    for j in 0..t {
        let qj = &q[j * d..(j + 1) * d];
        let mut top = F::from_f64(f64::NEG_INFINITY);
        for (i, s) in scores[..=j].iter_mut().enumerate() {
            *s = dot(qj, &k[i * d..(i + 1) * d]) * scale;
            top = top.max(*s);
        }
        let row = &mut out[j * d..(j + 1) * d];
        let mut z = F::zero();
        for (i, &s) in scores[..=j].iter().enumerate() {
            let e = (s - top).exp();
            z += e;
            axpy(row, e, &v[i * d..(i + 1) * d]);
        }
        let inv = F::one() / z;
        row.iter_mut().for_each(|r| *r *= inv);
    }
    Tensor::new([t, d], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub heads: usize,
    pub head_dim: usize,
    pub chunk_len: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repeats: 5,
            warmup: 3,
            seed: 2024,
            heads: 1,
            head_dim: 64,
            chunk_len: 64,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 5 {
            return Err(Error::Parameter(format!("at least 5 repeats are required, got {}", self.repeats)));
        }
        if self.heads == 0 || self.head_dim == 0 || self.chunk_len == 0 {
            return Err(Error::Parameter(
                "heads, head_dim and chunk_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub kernel: BenchKernel,
    pub len: usize,
    pub state: usize,
    pub flops: u64,
    pub memory: u64,
    pub median_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub repeats: usize,
    /// Median below what the clock can resolve; excluded from slope fits.
    pub flagged: bool,
}

/// Least-squares fit of `ln(time) = slope·ln(L) + intercept` at fixed `N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub kernel: BenchKernel,
    pub state: usize,
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub config: BenchConfig,
    pub points: Vec<ScalingPoint>,
    pub fits: Vec<SlopeFit>,
    /// Points not run, with the reason.
    pub skipped: Vec<String>,
}

impl ScalingReport {
    pub fn point(&self, kernel: BenchKernel, len: usize, state: usize) -> Option<&ScalingPoint> {
        self.points
            .iter()
            .find(|p| p.kernel == kernel && p.len == len && p.state == state)
    }

    pub fn fit(&self, kernel: BenchKernel, state: usize) -> Option<&SlopeFit> {
        self.fits.iter().find(|f| f.kernel == kernel && f.state == state)
    }

    /// Whitespace-separated columns with `#` comments, readable by gnuplot
    /// and by [`parse_tsv`].
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# repeats={} warmup={} seed={}\n", self.config.repeats, self.config.warmup, self.config.seed);
        s.push_str("# kernel\tL\tN\tflops\tmemory\tmedian_s\tmin_s\tmax_s\trepeats\tflagged\n");
        for p in &self.points {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{}\t{}\n",
                p.kernel,
                p.len,
                p.state,
                p.flops,
                p.memory,
                p.median_seconds,
                p.min_seconds,
                p.max_seconds,
                p.repeats,
                u8::from(p.flagged)
            ));
        }
        for f in &self.fits {
            s.push_str(&format!(
                "# fit {} N={} slope={:.4} intercept={:.4} residual={:.4} points={}\n",
                f.kernel, f.state, f.slope, f.intercept, f.residual, f.points
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Reads the point rows written by [`ScalingReport::to_tsv`].
pub fn parse_tsv(text: &str) -> Result<Vec<ScalingPoint>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("line {}: {what}", no + 1));
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 10 {
            return Err(bad(&format!("expected 10 columns, found {}", cols.len())));
        }
        let int = |i: usize| cols[i].parse::<u64>().map_err(|_| bad(&format!("column {} is not an integer", i + 1)));
        let real = |i: usize| cols[i].parse::<f64>().map_err(|_| bad(&format!("column {} is not a number", i + 1)));
        out.push(ScalingPoint {
            kernel: cols[0].parse().map_err(|_| bad("unknown kernel"))?,
            len: int(1)? as usize,
            state: int(2)? as usize,
            flops: int(3)?,
            memory: int(4)?,
            median_seconds: real(5)?,
            min_seconds: real(6)?,
            max_seconds: real(7)?,
            repeats: int(8)? as usize,
            flagged: int(9)? != 0,
        });
    }
    Ok(out)
}

/// One fit per `(kernel, N)` with at least two unflagged lengths.
pub fn fit_slopes(points: &[ScalingPoint]) -> Vec<SlopeFit> {
    let mut keys: Vec<(BenchKernel, usize)> = Vec::new();
    for p in points {
        if !keys.contains(&(p.kernel, p.state)) {
            keys.push((p.kernel, p.state));
        }
    }
    keys.into_iter()
        .filter_map(|(kernel, state)| {
            let xy: Vec<(f64, f64)> = points
                .iter()
                .filter(|p| p.kernel == kernel && p.state == state && !p.flagged && p.median_seconds > 0.0)
                .map(|p| ((p.len as f64).ln(), p.median_seconds.ln()))
                .collect();
            let (slope, intercept, residual) = least_squares(&xy)?;
            Some(SlopeFit {
                kernel,
                state,
                slope,
                intercept,
                residual,
                points: xy.len(),
            })
        })
        .collect()
}

fn least_squares(xy: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let n = xy.len() as f64;
    if xy.len() < 2 {
        return None;
    }
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xy.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    Some((slope, intercept, (rss / n).sqrt()))
}

/// Smallest nonzero step of the monotonic clock seen over a short probe.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn median(sorted: &[f64]) -> f64 {
    let m = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[m]
    } else {
        0.5 * (sorted[m - 1] + sorted[m])
    }
}

fn time_runs(warmup: usize, repeats: usize, mut run: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        run()?;
    }
    let mut out = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        run()?;
        out.push(start.elapsed().as_secs_f64());
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Checks `ssd_chunked` against a reference on the instance about to be timed:
/// `ssd_naive` where its length limit allows, the recurrence beyond it.
fn correctness_gate(bundle: &SsdTensorBundle<f32>, chunk: usize) -> Result<()> {
    let got = ssd_chunked(bundle, chunk)?;
    let (want, reference) = if bundle.dims().t <= NAIVE_LIMIT {
        (ssd_naive(bundle)?, "ssd_naive")
    } else {
        (ssd_recurrent(bundle), "ssd_recurrent")
    };
    let scale = want.data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
    let diff = got.max_abs_diff(&want);
    if !(diff <= 1e-3 * f64::from(scale)) {
        return Err(Error::Contract(format!(
            "ssd_chunked disagrees with {reference} at T={}: max |Δ| = {diff:e}",
            bundle.dims().t
        )));
    }
    Ok(())
}

/// Times every kernel on every `(L, N)` pair and fits slopes per kernel and
/// `N`. The quadratic SSD form is skipped above its length limit.
pub fn measure_scaling(
    kernels: &[BenchKernel],
    lengths: &[usize],
    states: &[usize],
    cfg: &BenchConfig,
) -> Result<ScalingReport> {
    cfg.validate()?;
    if kernels.is_empty() || lengths.is_empty() || states.is_empty() {
        return Err(Error::Parameter("kernel list and both grids must be nonempty".into()));
    }
    if lengths.contains(&0) || states.contains(&0) {
        return Err(Error::Parameter("grid values must be positive".into()));
    }
    let floor = timer_resolution().as_secs_f64() * 1000.0;
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for &n in states {
        for &len in lengths {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((len as u64) << 20) ^ n as u64);
            let dims = SsdDims {
                t: len,
                h: cfg.heads,
                p: cfg.head_dim,
                n,
            };
            let bundle = SsdTensorBundle::<f32>::random(dims, &mut rng);
            let x = Tensor::<f32>::randn([len, n], 1.0, &mut rng);
            let attn = AttentionParams::<f32>::init(n, &mut rng);
            if kernels.iter().any(|k| *k != BenchKernel::AttentionBaseline) {
                correctness_gate(&bundle, cfg.chunk_len)?;
            }
            let shape = MixerShape {
                len,
                state: n,
                dim: n,
                heads: cfg.heads,
                head_dim: cfg.head_dim,
                chunk: cfg.chunk_len,
            };
            for &kernel in kernels {
                if kernel == BenchKernel::SsdNaive && len > NAIVE_LIMIT {
                    skipped.push(format!("{kernel} L={len} N={n}: above the {NAIVE_LIMIT}-position limit"));
                    continue;
                }
                let samples = match kernel {
                    BenchKernel::SsdChunked => time_runs(cfg.warmup, cfg.repeats, || ssd_chunked(&bundle, cfg.chunk_len).map(drop))?,
                    BenchKernel::SsdNaive => time_runs(cfg.warmup, cfg.repeats, || ssd_naive(&bundle).map(drop))?,
                    BenchKernel::AttentionBaseline => {
                        time_runs(cfg.warmup, cfg.repeats, || attention_baseline_mixer(&x, &attn).map(drop))?
                    }
                };
                let med = median(&samples);
                log::info!("{kernel} L={len} N={n}: median {med:.4e} s");
                points.push(ScalingPoint {
                    kernel,
                    len,
                    state: n,
                    flops: flops_estimate(kernel, shape).total(),
                    memory: memory_estimate(kernel, shape),
                    median_seconds: med,
                    min_seconds: samples[0],
                    max_seconds: samples[samples.len() - 1],
                    repeats: samples.len(),
                    flagged: med < floor,
                });
            }
        }
    }
    let fits = fit_slopes(&points);
    Ok(ScalingReport {
        config: cfg.clone(),
        points,
        fits,
        skipped,
    })
}
