use crate::real::Real;

use super::{SegmentBoundaries, SsdDims};

/// Borrowed, unchecked view of an SSD input bundle.
#[derive(Clone, Copy)]
pub(crate) struct SsdView<'a, F> {
    pub dims: SsdDims,
    pub x: &'a [F],
    pub a: &'a [F],
    pub b: &'a [F],
    pub c: &'a [F],
    pub delta: &'a [F],
}

impl<'a, F: Real> SsdView<'a, F> {
    #[inline]
    pub fn x_row(&self, t: usize, head: usize) -> &'a [F] {
        let SsdDims { h, p, .. } = self.dims;
        &self.x[(t * h + head) * p..(t * h + head + 1) * p]
    }

    #[inline]
    pub fn b_row(&self, t: usize) -> &'a [F] {
        let n = self.dims.n;
        &self.b[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn c_row(&self, t: usize) -> &'a [F] {
        let n = self.dims.n;
        &self.c[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn a_at(&self, t: usize, head: usize) -> F {
        self.a[t * self.dims.h + head]
    }

    #[inline]
    pub fn delta_at(&self, t: usize, head: usize) -> F {
        self.delta[t * self.dims.h + head]
    }
}

#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// `y += alpha · x`
#[inline]
pub(crate) fn axpy<F: Real>(y: &mut [F], alpha: F, x: &[F]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Quadratic evaluation. For every pair `(j, i)` in the same segment the
/// decay product is accumulated directly, one factor at a time.
///
/// Multiplications per pair: `N + H·(P + 3)`.
pub(crate) fn naive_forward<F: Real>(v: &SsdView<'_, F>, segments: &SegmentBoundaries) -> Vec<F> {
    let SsdDims { t, h, p, .. } = v.dims;
    let mut y = vec![F::zero(); t * h * p];
    let starts = segments.segment_starts();
    let mut decay = vec![F::one(); h];
    for j in 0..t {
        let cj = v.c_row(j);
        decay.fill(F::one());
        for i in (starts[j]..=j).rev() {
            let cb = dot(cj, v.b_row(i));
            for (head, d) in decay.iter_mut().enumerate() {
                let m = cb * *d * v.delta_at(i, head);
                let yj = &mut y[(j * h + head) * p..(j * h + head + 1) * p];
                axpy(yj, m, v.x_row(i, head));
                *d *= v.a_at(i, head);
            }
        }
    }
    y
}

/// Stepwise recurrence with a zero state at every segment start.
pub(crate) fn recurrent_forward<F: Real>(v: &SsdView<'_, F>, segments: &SegmentBoundaries) -> Vec<F> {
    let SsdDims { t, h, p, n } = v.dims;
    let mut y = vec![F::zero(); t * h * p];
    let starts = segments.segment_starts();
    let mut state = vec![F::zero(); h * n * p];
    let mut u = vec![F::zero(); p];
    for step in 0..t {
        let fresh = starts[step] == step;
        let (bt, ct) = (v.b_row(step), v.c_row(step));
        for head in 0..h {
            let s = &mut state[head * n * p..(head + 1) * n * p];
            if fresh {
                s.fill(F::zero());
            } else {
                let at = v.a_at(step, head);
                s.iter_mut().for_each(|e| *e *= at);
            }
            let dt = v.delta_at(step, head);
            for (ui, &xi) in u.iter_mut().zip(v.x_row(step, head)) {
                *ui = dt * xi;
            }
            for (row, &bn) in s.chunks_exact_mut(p).zip(bt) {
                axpy(row, bn, &u);
            }
            let yt = &mut y[(step * h + head) * p..(step * h + head + 1) * p];
            for (row, &cn) in s.chunks_exact(p).zip(ct) {
                axpy(yt, cn, row);
            }
        }
    }
    y
}

/// Block evaluation on a grid of `chunk_len` positions aligned at 0.
///
/// Inside a block the masked quadratic form is evaluated exactly as in
/// [`naive_forward`]; the contribution of everything before the block enters
/// through the carried state, decayed by the running product of `a` since the
/// block start. The carry is dropped for positions whose segment starts inside
/// the block, which keeps packed segments independent.
pub(crate) fn chunked_forward<F: Real>(
    v: &SsdView<'_, F>,
    segments: &SegmentBoundaries,
    chunk_len: usize,
) -> Vec<F> {
    let SsdDims { t, h, p, n } = v.dims;
    let q_max = chunk_len.max(1);
    let mut y = vec![F::zero(); t * h * p];
    let starts = segments.segment_starts();
    let mut state = vec![F::zero(); h * n * p];
    let mut cb = vec![F::zero(); q_max * q_max];

    for c0 in (0..t).step_by(q_max) {
        let c1 = (c0 + q_max).min(t);
        for tj in c0..c1 {
            let lo = starts[tj].max(c0);
            let cj = v.c_row(tj);
            for i in lo..=tj {
                cb[(tj - c0) * q_max + (i - c0)] = dot(cj, v.b_row(i));
            }
        }
        let tail_start = starts[c1 - 1];
        let carry_out = tail_start < c0;

        for head in 0..h {
            let s = &mut state[head * n * p..(head + 1) * n * p];
            let mut din = F::one();
            for tj in c0..c1 {
                let lo = starts[tj].max(c0);
                let yj = &mut y[(tj * h + head) * p..(tj * h + head + 1) * p];
                let cb_row = &cb[(tj - c0) * q_max..];
                let mut decay = F::one();
                for i in (lo..=tj).rev() {
                    let m = cb_row[i - c0] * decay * v.delta_at(i, head);
                    axpy(yj, m, v.x_row(i, head));
                    decay *= v.a_at(i, head);
                }
                din *= v.a_at(tj, head);
                if starts[tj] < c0 {
                    for (row, &cn) in s.chunks_exact(p).zip(v.c_row(tj)) {
                        axpy(yj, cn * din, row);
                    }
                }
            }

            if carry_out {
                s.iter_mut().for_each(|e| *e *= din);
            } else {
                s.fill(F::zero());
            }
            let mut decay = F::one();
            for i in (tail_start.max(c0)..c1).rev() {
                let w = decay * v.delta_at(i, head);
                let xi = v.x_row(i, head);
                for (row, &bn) in s.chunks_exact_mut(p).zip(v.b_row(i)) {
                    axpy(row, bn * w, xi);
                }
                decay *= v.a_at(i, head);
            }
        }
    }
    y
}
