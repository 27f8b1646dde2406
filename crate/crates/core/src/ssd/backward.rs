//! Reverse-mode rules for the SSD mixer.
//!
//! Two independent routes: [`scan_backward`] runs the adjoint recurrence in
//! linear time with states checkpointed at block starts, [`naive_backward`]
//! differentiates the quadratic matrix form directly. The gradient-parity
//! tests compare them.

use crate::real::Real;

use super::kernels::{axpy, dot, SsdView};
use super::{SegmentBoundaries, SsdDims};

#[derive(Clone, Debug)]
pub(crate) struct SsdGrads<F> {
    pub x: Vec<F>,
    pub a: Vec<F>,
    pub b: Vec<F>,
    pub c: Vec<F>,
    pub delta: Vec<F>,
}

impl<F: Real> SsdGrads<F> {
    fn zeros(d: SsdDims) -> Self {
        SsdGrads {
            x: vec![F::zero(); d.t * d.h * d.p],
            a: vec![F::zero(); d.t * d.h],
            b: vec![F::zero(); d.t * d.n],
            c: vec![F::zero(); d.t * d.n],
            delta: vec![F::zero(); d.t * d.h],
        }
    }
}

/// One step of the state recurrence for all heads, in place.
fn advance<F: Real>(v: &SsdView<'_, F>, step: usize, fresh: bool, state: &mut [F]) {
    let SsdDims { h, p, n, .. } = v.dims;
    for head in 0..h {
        let s = &mut state[head * n * p..(head + 1) * n * p];
        if fresh {
            s.fill(F::zero());
        } else {
            let at = v.a_at(step, head);
            s.iter_mut().for_each(|e| *e *= at);
        }
        let dt = v.delta_at(step, head);
        let xt = v.x_row(step, head);
        for (row, &bn) in s.chunks_exact_mut(p).zip(v.b_row(step)) {
            axpy(row, bn * dt, xt);
        }
    }
}

/// Linear-time gradient of `Σ gy ⊙ y` with respect to every input.
///
/// States are stored only at block starts during a first forward sweep and
/// recomputed block by block while the adjoint state runs backwards:
///
/// ```text
/// G_t = C_t ⊗ gy_t + a_{t+1} · G_{t+1}        (no carry across a segment start)
/// ```
pub(crate) fn scan_backward<F: Real>(
    v: &SsdView<'_, F>,
    segments: &SegmentBoundaries,
    gy: &[F],
    chunk_len: usize,
) -> SsdGrads<F> {
    let d = v.dims;
    let SsdDims { t, h, p, n } = d;
    let q = chunk_len.max(1);
    let hnp = h * n * p;
    let mut g = SsdGrads::zeros(d);
    if t == 0 {
        return g;
    }
    let starts = segments.segment_starts();

    let n_chunks = t.div_ceil(q);
    let mut checkpoints = vec![F::zero(); n_chunks * hnp];
    let mut state = vec![F::zero(); hnp];
    for step in 0..t {
        if step % q == 0 {
            checkpoints[(step / q) * hnp..(step / q + 1) * hnp].copy_from_slice(&state);
        }
        advance(v, step, starts[step] == step, &mut state);
    }

    let mut adj = vec![F::zero(); hnp];
    let mut states = vec![F::zero(); q * hnp];
    let mut gu = vec![F::zero(); p];
    for ci in (0..n_chunks).rev() {
        let c0 = ci * q;
        let c1 = (c0 + q).min(t);
        let checkpoint = &checkpoints[ci * hnp..(ci + 1) * hnp];
        for step in c0..c1 {
            let (done, rest) = states.split_at_mut((step - c0) * hnp);
            let cur = &mut rest[..hnp];
            cur.copy_from_slice(if step == c0 { checkpoint } else { &done[(step - c0 - 1) * hnp..] });
            advance(v, step, starts[step] == step, cur);
        }

        for step in (c0..c1).rev() {
            let fresh = starts[step] == step;
            let s_t = &states[(step - c0) * hnp..(step - c0 + 1) * hnp];
            let s_prev = if step == c0 {
                checkpoint
            } else {
                &states[(step - c0 - 1) * hnp..(step - c0) * hnp]
            };
            let (bt, ct) = (v.b_row(step), v.c_row(step));
            for head in 0..h {
                let range = head * n * p..(head + 1) * n * p;
                let gy_t = &gy[(step * h + head) * p..(step * h + head + 1) * p];
                let a_h = &mut adj[range.clone()];
                for (row, &cn) in a_h.chunks_exact_mut(p).zip(ct) {
                    axpy(row, cn, gy_t);
                }
                for (k, row) in s_t[range.clone()].chunks_exact(p).enumerate() {
                    g.c[step * n + k] += dot(row, gy_t);
                }
                gu.fill(F::zero());
                for (row, &bn) in a_h.chunks_exact(p).zip(bt) {
                    axpy(&mut gu, bn, row);
                }
                let dt = v.delta_at(step, head);
                let xt = v.x_row(step, head);
                let dx = dot(&gu, xt);
                for (k, row) in a_h.chunks_exact(p).enumerate() {
                    g.b[step * n + k] += dt * dot(row, xt);
                }
                let gx = &mut g.x[(step * h + head) * p..(step * h + head + 1) * p];
                axpy(gx, dt, &gu);
                g.delta[step * h + head] = dx;
                if fresh {
                    a_h.fill(F::zero());
                } else {
                    g.a[step * h + head] = dot(a_h, &s_prev[range]);
                    let at = v.a_at(step, head);
                    a_h.iter_mut().for_each(|e| *e *= at);
                }
            }
        }
    }
    g
}

/// Quadratic gradient straight from the matrix form.
///
/// With `L[j][i] = a_{i+1}⋯a_j` and upstream weight `W[j][i] = gy_j · u_i`,
/// the decay gradient is
///
/// ```text
/// ∂/∂a_k = Σ_{i<k} (a_{i+1}⋯a_{k-1}) · V_i(k),   V_i(k) = W'[k][i] + a_{k+1}·V_i(k+1)
/// ```
///
/// where `W' = W ⊙ (C·Bᵀ)`. No division by `a` is needed.
pub(crate) fn naive_backward<F: Real>(
    v: &SsdView<'_, F>,
    segments: &SegmentBoundaries,
    gy: &[F],
) -> SsdGrads<F> {
    let d = v.dims;
    let SsdDims { h, p, n, .. } = d;
    let mut g = SsdGrads::zeros(d);
    for seg in segments.ranges() {
        let (s0, len) = (seg.start, seg.len());
        let idx = |j: usize, i: usize| (j - s0) * len + (i - s0);
        let mut cb = vec![F::zero(); len * len];
        for j in seg.clone() {
            for i in s0..=j {
                cb[idx(j, i)] = dot(v.c_row(j), v.b_row(i));
            }
        }
        let mut g_cb = vec![F::zero(); len * len];
        let mut g_decay = vec![F::zero(); len * len];
        let mut suffix = vec![F::zero(); len * len];
        for head in 0..h {
            let mut gu = vec![F::zero(); len * p];
            for j in seg.clone() {
                let gy_j = &gy[(j * h + head) * p..(j * h + head + 1) * p];
                let mut decay = F::one();
                for i in (s0..=j).rev() {
                    let dt = v.delta_at(i, head);
                    let w = dt * dot(gy_j, v.x_row(i, head));
                    axpy(&mut gu[(i - s0) * p..(i - s0 + 1) * p], cb[idx(j, i)] * decay, gy_j);
                    g_cb[idx(j, i)] += w * decay;
                    g_decay[idx(j, i)] = w * cb[idx(j, i)];
                    decay *= v.a_at(i, head);
                }
            }
            for i in seg.clone() {
                let gu_i = &gu[(i - s0) * p..(i - s0 + 1) * p];
                let dt = v.delta_at(i, head);
                g.delta[i * h + head] = dot(gu_i, v.x_row(i, head));
                axpy(&mut g.x[(i * h + head) * p..(i * h + head + 1) * p], dt, gu_i);
            }
            for i in seg.clone() {
                let mut acc = F::zero();
                for k in (i + 1..seg.end).rev() {
                    acc = if k + 1 < seg.end {
                        g_decay[idx(k, i)] + v.a_at(k + 1, head) * acc
                    } else {
                        g_decay[idx(k, i)]
                    };
                    suffix[idx(k, i)] = acc;
                }
            }
            for k in seg.clone() {
                let mut left = F::one();
                let mut total = F::zero();
                for i in (s0..k).rev() {
                    total += left * suffix[idx(k, i)];
                    left *= v.a_at(i, head);
                }
                g.a[k * h + head] = total;
            }
        }
        for j in seg.clone() {
            for i in s0..=j {
                let w = g_cb[idx(j, i)];
                axpy(&mut g.c[j * n..(j + 1) * n], w, v.b_row(i));
                axpy(&mut g.b[i * n..(i + 1) * n], w, v.c_row(j));
            }
        }
    }
    g
}
