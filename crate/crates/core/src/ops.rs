//! Forward kernels for the dense primitives. The autodiff tape calls these
//! and adds the matching backward rules.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Lower bound applied to probabilities before taking the log in
/// [`cross_entropy`].
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluMode {
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
    #[default]
    Tanh,
    /// `x·Φ(x)` with the exact normal CDF.
    Erf,
}

pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
    }
    let mut out = vec![F::zero(); m * n];
    F::gemm_acc(m, k, n, a.data(), k, 1, b.data(), n, 1, &mut out, n, 1);
    Tensor::new([m, n], out)
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_bt<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.dims2("matmul_bt")?;
    let (n, k2) = b.dims2("matmul_bt")?;
    if k != k2 {
        return Err(Error::dim("matmul_bt", format!("[{m}×{k}] · [{n}×{k2}]ᵀ")));
    }
    let mut out = vec![F::zero(); m * n];
    F::gemm_acc(m, k, n, a.data(), k, 1, b.data(), 1, k, &mut out, n, 1);
    Tensor::new([m, n], out)
}

pub(crate) struct NormStats<F> {
    pub mean: Vec<F>,
    pub rstd: Vec<F>,
}

pub(crate) fn layer_norm_with_stats<F: Real>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    shift: &Tensor<F>,
    eps: f64,
) -> Result<(Tensor<F>, NormStats<F>)> {
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("layer_norm eps must be positive, got {eps}")));
    }
    let d = x.cols();
    if gain.numel() != d || shift.numel() != d {
        return Err(Error::dim(
            "layer_norm",
            format!("row width {d}, gain {}, shift {}", gain.numel(), shift.numel()),
        ));
    }
    let rows = x.rows();
    let inv_d = F::from_f64(1.0 / d as f64);
    let eps = F::from_f64(eps);
    let mut out = Vec::with_capacity(x.numel());
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mu = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        for ((&v, &g), &s) in row.iter().zip(gain.data()).zip(shift.data()) {
            out.push((v - mu) * rs * g + s);
        }
        mean.push(mu);
        rstd.push(rs);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, NormStats { mean, rstd }))
}

/// Normalizes each last-axis row to zero mean and unit variance, then applies
/// `gain ⊙ · + shift`.
pub fn layer_norm<F: Real>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    shift: &Tensor<F>,
    eps: f64,
) -> Result<Tensor<F>> {
    layer_norm_with_stats(x, gain, shift, eps).map(|(t, _)| t)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu_scalar<F: Real>(x: F, mode: GeluMode) -> F {
    let half = F::from_f64(0.5);
    match mode {
        GeluMode::Tanh => {
            let inner = F::from_f64(SQRT_2_OVER_PI) * (x + F::from_f64(GELU_CUBIC) * x * x * x);
            half * x * (F::one() + inner.tanh())
        }
        GeluMode::Erf => half * x * (F::one() + (x * F::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf()),
    }
}

#[inline]
pub(crate) fn gelu_derivative<F: Real>(x: F, mode: GeluMode) -> F {
    let half = F::from_f64(0.5);
    match mode {
        GeluMode::Tanh => {
            let c = F::from_f64(SQRT_2_OVER_PI);
            let k = F::from_f64(GELU_CUBIC);
            let t = (c * (x + k * x * x * x)).tanh();
            half * (F::one() + t)
                + half * x * (F::one() - t * t) * c * (F::one() + F::from_f64(3.0) * k * x * x)
        }
        GeluMode::Erf => {
            let cdf = half * (F::one() + (x * F::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = (-(x * x) * half).exp() * F::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            cdf + x * pdf
        }
    }
}

pub fn gelu<F: Real>(x: &Tensor<F>, mode: GeluMode) -> Tensor<F> {
    x.map(|v| gelu_scalar(v, mode))
}

#[inline]
pub(crate) fn softplus_scalar<F: Real>(x: F) -> F {
    // log(1 + e^x) = max(x, 0) + log(1 + e^{-|x|})
    let zero = F::zero();
    x.max(zero) + (F::one() + (-x.abs()).exp()).ln()
}

#[inline]
pub(crate) fn sigmoid_scalar<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn check_probability(p: f64, what: &str) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("{what} must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// Per-element multipliers: `0` for dropped entries, `1/(1-p)` for survivors.
pub(crate) fn dropout_scales<F: Real, R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<F> {
    let keep = F::from_f64(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
        .collect()
}

/// Inverted dropout. Identity when `training` is false or `p == 0`.
pub fn dropout<F: Real, R: Rng + ?Sized>(
    x: &Tensor<F>,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<F>> {
    check_probability(p, "dropout probability")?;
    if !training || p == 0.0 {
        return Ok(x.detached());
    }
    let scales = dropout_scales::<F, R>(x.numel(), p, rng);
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(&scales).map(|(&v, &s)| v * s).collect(),
    )
}

/// Max-subtracted softmax over each last-axis row.
pub fn softmax_rows<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let cols = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().copied().fold(row[0], F::max);
        let start = out.len();
        let mut total = F::zero();
        for &v in row {
            let e = (v - m).exp();
            total += e;
            out.push(e);
        }
        let inv = F::one() / total;
        for v in &mut out[start..start + cols] {
            *v *= inv;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax preserves shape")
}

pub(crate) fn check_targets(targets: &[usize], rows: usize, vocab: usize) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::dim(
            "cross_entropy",
            format!("{rows} rows but {} targets", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Index {
            what: "target vocabulary",
            index: bad,
            size: vocab,
        });
    }
    Ok(())
}

/// Mean over rows of `-ln(max(p[target], 1e-12))`.
pub fn cross_entropy<F: Real>(probabilities: &Tensor<F>, targets: &[usize]) -> Result<Tensor<F>> {
    let (rows, vocab) = probabilities.dims2("cross_entropy")?;
    check_targets(targets, rows, vocab)?;
    for r in 0..rows {
        let s: f64 = probabilities.row(r).iter().map(|v| v.to_f64()).sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!(
                "cross_entropy row {r} sums to {s}, expected a probability distribution"
            )));
        }
    }
    let clamp = F::from_f64(LOG_CLAMP);
    let mut total = F::zero();
    for (r, &t) in targets.iter().enumerate() {
        total += -probabilities.row(r)[t].max(clamp).ln();
    }
    Ok(Tensor::scalar(total / F::from_f64(rows.max(1) as f64)))
}
