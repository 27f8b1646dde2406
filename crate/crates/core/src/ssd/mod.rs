//! Structured state space duality mixer.
//!
//! For one head the mixer is the causal linear map `y = M·x` with
//!
//! ```text
//! M[j][i] = (C_j · B_i) · Δ_i · a_{i+1} · … · a_j     (i ≤ j, same segment)
//! M[j][i] = 0                                          otherwise
//! ```
//!
//! which is also the recurrence
//!
//! ```text
//! S_t = a_t · S_{t-1} + B_t ⊗ (Δ_t · x_t)      S ∈ R^{N×P}, S = 0 at a segment start
//! y_t = C_tᵀ · S_t
//! ```
//!
//! Three evaluation strategies are provided and must agree:
//!
//! * [`ssd_naive`]: entry-by-entry evaluation of `M`, `O(T²)`.
//! * [`ssd_recurrent`]: the stepwise recurrence, `O(T·N·P)`.
//! * [`ssd_chunked`] / [`ssd_packed`]: blocks of `Q` positions, exact
//!   quadratic form inside a block and a carried state between blocks.
//!
//! Layouts (row-major): `x: [T, H, P]`, `a, delta: [T, H]`, `b, c: [T, N]`.
//! `B` and `C` are shared by all heads, the decay `a` is per head.

mod backward;
pub(crate) mod kernels;
mod projection;

pub(crate) use backward::{naive_backward, scan_backward};
pub(crate) use kernels::{chunked_forward, naive_forward, recurrent_forward, SsdView};
pub(crate) use projection::projection_block;
pub use projection::{project_inputs, SsdProjectionParams, DECAY_FLOOR};

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Default sequence-length limit for the quadratic evaluation.
pub const NAIVE_LIMIT: usize = 4096;

/// Default block length for the chunked evaluation.
pub const DEFAULT_CHUNK_LEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsdDims {
    pub t: usize,
    pub h: usize,
    pub p: usize,
    pub n: usize,
}

/// Which evaluation strategy a differentiable SSD node uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsdKernel {
    Naive,
    Recurrent,
    Chunked(usize),
}

/// Cumulative offsets of the user segments in a packed sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentBoundaries {
    offsets: Vec<usize>,
}

impl SegmentBoundaries {
    pub fn new(offsets: Vec<usize>) -> Result<Self> {
        if offsets.len() < 2 {
            return Err(Error::Boundary(format!(
                "need at least one segment, got offsets {offsets:?}"
            )));
        }
        if offsets[0] != 0 {
            return Err(Error::Boundary(format!("offsets must start at 0, got {}", offsets[0])));
        }
        if let Some(w) = offsets.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Boundary(format!(
                "offsets must be strictly increasing, found {} then {}",
                w[0], w[1]
            )));
        }
        Ok(SegmentBoundaries { offsets })
    }

    pub fn single(len: usize) -> Result<Self> {
        Self::new(vec![0, len])
    }

    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        let mut acc = 0;
        for &l in lengths {
            acc += l;
            offsets.push(acc);
        }
        Self::new(offsets)
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Number of segments.
    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Total packed length.
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.ranges().map(|r| r.len()).collect()
    }

    pub fn check_total(&self, t: usize) -> Result<()> {
        if self.total() != t {
            return Err(Error::Boundary(format!(
                "offsets end at {} but the sequence has {t} positions",
                self.total()
            )));
        }
        Ok(())
    }

    /// `start[t]` = first position of the segment containing `t`.
    pub fn segment_starts(&self) -> Vec<usize> {
        let mut starts = Vec::with_capacity(self.total());
        for r in self.ranges() {
            starts.extend(std::iter::repeat_n(r.start, r.len()));
        }
        starts
    }

    /// Row permutation reversing every segment in place.
    pub fn flip_permutation(&self) -> Vec<usize> {
        let mut perm = Vec::with_capacity(self.total());
        for r in self.ranges() {
            perm.extend(r.rev());
        }
        perm
    }

    /// Index of the final position of every segment.
    pub fn last_positions(&self) -> Vec<usize> {
        self.offsets[1..].iter().map(|&o| o - 1).collect()
    }
}

/// Per-position selective state-space inputs for one packed sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SsdTensorBundle<F: Real = f32> {
    pub x: Tensor<F>,
    pub a: Tensor<F>,
    pub b: Tensor<F>,
    pub c: Tensor<F>,
    pub delta: Tensor<F>,
}

impl<F: Real> SsdTensorBundle<F> {
    pub fn new(x: Tensor<F>, a: Tensor<F>, b: Tensor<F>, c: Tensor<F>, delta: Tensor<F>) -> Result<Self> {
        let bundle = SsdTensorBundle { x, a, b, c, delta };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Bundle with `Δ ≡ 1`, i.e. the undiscretized form `y = M·x`.
    pub fn without_discretization(x: Tensor<F>, a: Tensor<F>, b: Tensor<F>, c: Tensor<F>) -> Result<Self> {
        let delta = Tensor::full(a.shape().to_vec(), F::one());
        Self::new(x, a, b, c, delta)
    }

    /// Gaussian `x, B, C`; decay uniform in `[0.5, 1)`; step size uniform in
    /// `[0.05, 1)`.
    pub fn random<R: Rng + ?Sized>(dims: SsdDims, rng: &mut R) -> Self {
        let SsdDims { t, h, p, n } = dims;
        SsdTensorBundle {
            x: Tensor::randn([t, h, p], 1.0, rng),
            a: Tensor::uniform([t, h], 0.5, 1.0, rng),
            b: Tensor::randn([t, n], 1.0, rng),
            c: Tensor::randn([t, n], 1.0, rng),
            delta: Tensor::uniform([t, h], 0.05, 1.0, rng),
        }
    }

    pub fn dims(&self) -> SsdDims {
        let s = self.x.shape();
        SsdDims {
            t: s[0],
            h: s[1],
            p: s[2],
            n: self.b.shape()[1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [t, h, _] = self.x.shape()[..] else {
            return Err(Error::dim("ssd bundle", format!("x must be [T,H,P], got {:?}", self.x.shape())));
        };
        for (name, tensor) in [("a", &self.a), ("delta", &self.delta)] {
            if tensor.shape() != [t, h] {
                return Err(Error::dim(
                    "ssd bundle",
                    format!("{name} must be [{t},{h}], got {:?}", tensor.shape()),
                ));
            }
        }
        let n = match self.b.shape() {
            [tb, n] if *tb == t => *n,
            s => return Err(Error::dim("ssd bundle", format!("b must be [{t},N], got {s:?}"))),
        };
        if self.c.shape() != [t, n] {
            return Err(Error::dim(
                "ssd bundle",
                format!("c must be [{t},{n}], got {:?}", self.c.shape()),
            ));
        }
        if let Some(v) = self.a.data().iter().find(|v| !(**v > F::zero() && **v <= F::one())) {
            return Err(Error::Parameter(format!("decay values must lie in (0, 1], found {v}")));
        }
        if let Some(v) = self.delta.data().iter().find(|v| !(**v > F::zero())) {
            return Err(Error::Parameter(format!("step sizes must be positive, found {v}")));
        }
        Ok(())
    }

    pub(crate) fn view(&self) -> SsdView<'_, F> {
        SsdView {
            dims: self.dims(),
            x: self.x.data(),
            a: self.a.data(),
            b: self.b.data(),
            c: self.c.data(),
            delta: self.delta.data(),
        }
    }

    /// Positions `range` as a standalone bundle.
    pub fn slice(&self, range: Range<usize>) -> Self {
        SsdTensorBundle {
            x: self.x.slice_leading(range.clone()),
            a: self.a.slice_leading(range.clone()),
            b: self.b.slice_leading(range.clone()),
            c: self.c.slice_leading(range.clone()),
            delta: self.delta.slice_leading(range),
        }
    }

    fn output(&self, data: Vec<F>) -> Tensor<F> {
        Tensor::new(self.x.shape().to_vec(), data).expect("output shape matches x")
    }
}

/// Entry-by-entry evaluation of the masked semiseparable matrix.
pub fn ssd_naive<F: Real>(bundle: &SsdTensorBundle<F>) -> Result<Tensor<F>> {
    ssd_naive_with_limit(bundle, NAIVE_LIMIT)
}

pub fn ssd_naive_with_limit<F: Real>(bundle: &SsdTensorBundle<F>, limit: usize) -> Result<Tensor<F>> {
    let t = bundle.dims().t;
    if t > limit {
        return Err(Error::Capacity { len: t, limit });
    }
    let segments = SegmentBoundaries::single(t)?;
    Ok(bundle.output(naive_forward(&bundle.view(), &segments)))
}

pub fn ssd_recurrent<F: Real>(bundle: &SsdTensorBundle<F>) -> Tensor<F> {
    let t = bundle.dims().t;
    if t == 0 {
        return bundle.output(Vec::new());
    }
    let segments = SegmentBoundaries::single(t).expect("non-empty sequence");
    bundle.output(recurrent_forward(&bundle.view(), &segments))
}

pub fn ssd_chunked<F: Real>(bundle: &SsdTensorBundle<F>, chunk_len: usize) -> Result<Tensor<F>> {
    let t = bundle.dims().t;
    if t == 0 {
        return Ok(bundle.output(Vec::new()));
    }
    ssd_packed(bundle, &SegmentBoundaries::single(t)?, chunk_len)
}

/// Chunked evaluation over a packed sequence. The carried state is reset at
/// every segment start, so each segment is mixed independently of the others.
pub fn ssd_packed<F: Real>(
    bundle: &SsdTensorBundle<F>,
    segments: &SegmentBoundaries,
    chunk_len: usize,
) -> Result<Tensor<F>> {
    if chunk_len == 0 {
        return Err(Error::Parameter("chunk length must be at least 1".into()));
    }
    segments.check_total(bundle.dims().t)?;
    Ok(bundle.output(chunked_forward(&bundle.view(), segments, chunk_len)))
}

/// Dispatch a strategy over a packed view.
pub(crate) fn forward_with<F: Real>(
    view: &SsdView<'_, F>,
    segments: &SegmentBoundaries,
    kernel: SsdKernel,
) -> Vec<F> {
    match kernel {
        SsdKernel::Naive => naive_forward(view, segments),
        SsdKernel::Recurrent => recurrent_forward(view, segments),
        SsdKernel::Chunked(q) => chunked_forward(view, segments, q),
    }
}

#[cfg(test)]
mod tests;
