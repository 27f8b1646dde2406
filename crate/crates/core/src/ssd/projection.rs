use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

use super::{SegmentBoundaries, SsdKernel, SsdTensorBundle};

/// Linear maps from a `D`-wide hidden token to the selective SSM inputs, plus
/// the per-head log decay rate and the output projection back to `D`.
///
/// `T` is the slot type: `Tensor<F>` for stored parameters, [`Var`] once the
/// parameters are bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct SsdProjectionParams<T = Tensor<f32>> {
    /// `[D, H·P]`
    pub w_x: T,
    /// `[D, N]`
    pub w_b: T,
    /// `[D, N]`
    pub w_c: T,
    /// `[D, H]`
    pub w_dt: T,
    /// `[H]`
    pub b_dt: T,
    /// `[H]`, decay rate is `exp(log_decay)`
    pub log_decay: T,
    /// `[H·P, D]`
    pub w_out: T,
}

impl<T> SsdProjectionParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> SsdProjectionParams<U> {
        let mut g = |name: &str, t: &T| f(&format!("{prefix}.{name}"), t);
        SsdProjectionParams {
            w_x: g("w_x", &self.w_x),
            w_b: g("w_b", &self.w_b),
            w_c: g("w_c", &self.w_c),
            w_dt: g("w_dt", &self.w_dt),
            b_dt: g("b_dt", &self.b_dt),
            log_decay: g("log_decay", &self.log_decay),
            w_out: g("w_out", &self.w_out),
        }
    }

    /// Named slots in a fixed order.
    pub fn slots(&self, prefix: &str) -> Vec<(String, &T)> {
        [
            ("w_x", &self.w_x),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
            ("w_dt", &self.w_dt),
            ("b_dt", &self.b_dt),
            ("log_decay", &self.log_decay),
            ("w_out", &self.w_out),
        ]
        .into_iter()
        .map(|(name, slot)| (format!("{prefix}.{name}"), slot))
        .collect()
    }

    pub fn slots_mut(&mut self, prefix: &str) -> Vec<(String, &mut T)> {
        [
            ("w_x", &mut self.w_x),
            ("w_b", &mut self.w_b),
            ("w_c", &mut self.w_c),
            ("w_dt", &mut self.w_dt),
            ("b_dt", &mut self.b_dt),
            ("log_decay", &mut self.log_decay),
            ("w_out", &mut self.w_out),
        ]
        .into_iter()
        .map(|(name, slot)| (format!("{prefix}.{name}"), slot))
        .collect()
    }
}

impl<F: Real> SsdProjectionParams<Tensor<F>> {
    /// Gaussian projections scaled by fan-in, step-size bias drawn so that
    /// `softplus(b_dt)` is log-uniform in `[1e-3, 1e-1]`, decay rates uniform
    /// in `[1, 16]`.
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, head_dim: usize, state: usize, rng: &mut R) -> Self {
        let inner = heads * head_dim;
        let s_in = 1.0 / (dim as f64).sqrt();
        let b_dt = Tensor::from_fn([heads], |_| {
            let dt = (rng.gen_range(1e-3f64.ln()..1e-1f64.ln())).exp();
            // inverse softplus
            F::from_f64(dt + (-(-dt).exp_m1()).ln())
        });
        let log_decay = Tensor::from_fn([heads], |_| F::from_f64(rng.gen_range(1.0f64..16.0).ln()));
        SsdProjectionParams {
            w_x: Tensor::randn([dim, inner], s_in, rng),
            w_b: Tensor::randn([dim, state], s_in, rng),
            w_c: Tensor::randn([dim, state], s_in, rng),
            w_dt: Tensor::randn([dim, heads], s_in, rng),
            b_dt,
            log_decay,
            w_out: Tensor::randn([inner, dim], 1.0 / (inner as f64).sqrt(), rng),
        }
    }

    pub fn heads(&self) -> usize {
        self.b_dt.numel()
    }
}

/// Smallest decay and step size produced by the projection.
pub const DECAY_FLOOR: f64 = 1e-30;

/// Tape handles for the projected SSM inputs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ProjectedVars {
    pub x: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub delta: Var,
}

/// `x, B, C` linear in `hidden`; `Δ = softplus(hidden·W_dt + b_dt)`;
/// `a = exp(-Δ · exp(log_decay))`.
///
/// `a` is clamped to `[DECAY_FLOOR, 1 - ε/2]` so rounding never produces an
/// exact 0 or 1, and `Δ` is floored the same way.
pub(crate) fn project_on_tape<F: Real>(
    tape: &mut Tape<F>,
    hidden: Var,
    p: &SsdProjectionParams<Var>,
) -> Result<ProjectedVars> {
    let x = tape.matmul(hidden, p.w_x)?;
    let b = tape.matmul(hidden, p.w_b)?;
    let c = tape.matmul(hidden, p.w_c)?;
    let dt_lin = tape.matmul(hidden, p.w_dt)?;
    let dt_lin = tape.add_row(dt_lin, p.b_dt)?;
    let delta = tape.softplus(dt_lin);
    let delta = tape.clamp(delta, F::from_f64(DECAY_FLOOR), F::from_f64(f64::MAX));
    let rate = tape.exp(p.log_decay);
    let decay_log = tape.mul_row(delta, rate)?;
    let decay_log = tape.scale(decay_log, -F::one());
    let a = tape.exp(decay_log);
    let a = tape.clamp(a, F::from_f64(DECAY_FLOOR), F::from_f64(1.0 - F::EPSILON / 2.0));
    Ok(ProjectedVars { x, a, b, c, delta })
}

/// In-projection, SSD mixing over the packed segments, out-projection.
pub(crate) fn projection_block<F: Real>(
    tape: &mut Tape<F>,
    hidden: Var,
    p: &SsdProjectionParams<Var>,
    heads: usize,
    segments: &SegmentBoundaries,
    kernel: SsdKernel,
) -> Result<Var> {
    let v = project_on_tape(tape, hidden, p)?;
    let y = tape.ssd(v.x, v.a, v.b, v.c, v.delta, heads, segments, kernel)?;
    tape.matmul(y, p.w_out)
}

/// Projects hidden tokens `[T, D]` into an SSD bundle.
pub fn project_inputs<F: Real>(
    hidden: &Tensor<F>,
    params: &SsdProjectionParams<Tensor<F>>,
) -> Result<SsdTensorBundle<F>> {
    let mut tape = Tape::new();
    let h = tape.constant(hidden.detached());
    let bound = params.map("ssd", &mut |_, t| tape.constant(t.detached()));
    let v = project_on_tape(&mut tape, h, &bound)?;
    let t = hidden.shape()[0];
    let heads = params.heads();
    let inner = params.w_x.shape()[1];
    SsdTensorBundle::new(
        tape.value(v.x).detached().reshape([t, heads, inner / heads])?,
        tape.value(v.a).detached(),
        tape.value(v.b).detached(),
        tape.value(v.c).detached(),
        tape.value(v.delta).detached(),
    )
}
