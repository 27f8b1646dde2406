//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and the information its backward rule needs. [`Tape::backward`]
//! walks the nodes in reverse and returns the gradient of a scalar node with
//! respect to every node that depends on a `requires_grad` leaf.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, GeluMode, NormStats};
use crate::real::Real;
use crate::ssd::{self, SegmentBoundaries, SsdDims, SsdKernel, SsdView};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    Exp(Var),
    Softplus(Var),
    Clamp(Var, F, F),
    Gelu(Var, GeluMode),
    Dropout(Var, Vec<F>),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        stats: NormStats<F>,
    },
    SoftmaxRows(Var),
    CrossEntropy(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ReplaceRows {
        x: Var,
        fill: Var,
        positions: Vec<usize>,
    },
    Sum(Var),
    Reshape(Var),
    Ssd {
        inputs: [Var; 5],
        dims: SsdDims,
        segments: SegmentBoundaries,
        kernel: SsdKernel,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
}

pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn acc<F: Real>(slot: &mut Option<Vec<F>>, len: usize) -> &mut Vec<F> {
    slot.get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        debug_assert!(
            value.all_finite() || parents.iter().any(|p| !self.nodes[p.0].value.all_finite()),
            "non-finite value produced from finite inputs"
        );
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Gradients flow into it if `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        let tracked = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor.detached(),
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(&self, op: &'static str, x: Var, row: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = xv.cols();
        if rv.numel() != c {
            return Err(Error::dim(op, format!("row width {c}, broadcast vector {}", rv.numel())));
        }
        let data = xv
            .data()
            .chunks_exact(c.max(1))
            .flat_map(|r| r.iter().zip(rv.data()).map(|(&a, &b)| f(a, b)))
            .collect();
        Tensor::new(xv.shape().to_vec(), data)
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", x, bias, |a, b| a + b)?;
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// `x ⊙ scale` with `scale` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, scale: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", x, scale, |a, b| a * b)?;
        Ok(self.push(out, Op::MulRow(x, scale), &[x, scale]))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(F::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::softplus_scalar);
        self.push(out, Op::Softplus(x), &[x])
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let out = self.value(x).map(|v| if v < lo { lo } else if v > hi { hi } else { v });
        self.push(out, Op::Clamp(x, lo, hi), &[x])
    }

    pub fn gelu(&mut self, x: Var, mode: GeluMode) -> Var {
        let out = ops::gelu(self.value(x), mode);
        self.push(out, Op::Gelu(x, mode), &[x])
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        ops::check_probability(p, "dropout probability")?;
        if !training || p == 0.0 {
            return Ok(x);
        }
        let scales = ops::dropout_scales::<F, R>(self.value(x).numel(), p, rng);
        let data = self.value(x).data().iter().zip(&scales).map(|(&v, &s)| v * s).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::Dropout(x, scales), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (out, stats) = ops::layer_norm_with_stats(self.value(x), self.value(gain), self.value(shift), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, shift, stats }, &[x, gain, shift]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = ops::softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    pub fn cross_entropy(&mut self, probabilities: Var, targets: &[usize]) -> Result<Var> {
        let out = ops::cross_entropy(self.value(probabilities), targets)?;
        Ok(self.push(out, Op::CrossEntropy(probabilities, targets.to_vec()), &[probabilities]))
    }

    /// Row `k` of the result is row `idx[k]` of `src` (leading axis).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(src).gather_rows(idx, "gather_rows source")?;
        Ok(self.push(out, Op::GatherRows(src, idx.to_vec()), &[src]))
    }

    /// Copy of `x` whose rows at `positions` are replaced by the vector `fill`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, positions: &[usize]) -> Result<Var> {
        let (xv, fv) = (self.value(x), self.value(fill));
        let c = xv.cols();
        if fv.numel() != c {
            return Err(Error::dim("replace_rows", format!("row width {c}, fill {}", fv.numel())));
        }
        let mut data = xv.data().to_vec();
        for &pos in positions {
            if pos >= xv.rows() {
                return Err(Error::Index {
                    what: "replace_rows",
                    index: pos,
                    size: xv.rows(),
                });
            }
            data[pos * c..(pos + 1) * c].copy_from_slice(fv.data());
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::ReplaceRows {
                x,
                fill,
                positions: positions.to_vec(),
            },
            &[x, fill],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).detached().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Differentiable SSD mixing over a packed sequence.
    ///
    /// `x: [T, H·P]`, `a, delta: [T, H]`, `b, c: [T, N]`; returns `[T, H·P]`.
    #[allow(clippy::too_many_arguments)]
    pub fn ssd(
        &mut self,
        x: Var,
        a: Var,
        b: Var,
        c: Var,
        delta: Var,
        heads: usize,
        segments: &SegmentBoundaries,
        kernel: SsdKernel,
    ) -> Result<Var> {
        let (t, hp) = self.value(x).dims2("ssd")?;
        if heads == 0 || hp % heads != 0 {
            return Err(Error::dim("ssd", format!("{hp} channels do not split into {heads} heads")));
        }
        let (tb, n) = self.value(b).dims2("ssd")?;
        if tb != t || self.shape(c) != [t, n] || self.shape(a) != [t, heads] || self.shape(delta) != [t, heads] {
            return Err(Error::dim(
                "ssd",
                format!(
                    "x {:?}, a {:?}, b {:?}, c {:?}, delta {:?}",
                    self.shape(x),
                    self.shape(a),
                    self.shape(b),
                    self.shape(c),
                    self.shape(delta)
                ),
            ));
        }
        segments.check_total(t)?;
        if let SsdKernel::Chunked(0) = kernel {
            return Err(Error::Parameter("chunk length must be at least 1".into()));
        }
        let dims = SsdDims { t, h: heads, p: hp / heads, n };
        let y = ssd::forward_with(&self.view(dims, [x, a, b, c, delta]), segments, kernel);
        let out = Tensor::new([t, hp], y)?;
        let inputs = [x, a, b, c, delta];
        Ok(self.push(
            out,
            Op::Ssd {
                inputs,
                dims,
                segments: segments.clone(),
                kernel,
            },
            &inputs,
        ))
    }

    fn view(&self, dims: SsdDims, [x, a, b, c, delta]: [Var; 5]) -> SsdView<'_, F> {
        SsdView {
            dims,
            x: self.value(x).data(),
            a: self.value(a).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            delta: self.value(delta).data(),
        }
    }

    /// Gradients of the scalar `loss` with respect to all tracked nodes.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            self.propagate(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, id: usize, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[id];
        let numel = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.tracked(*a) {
                    // ga = gout · bᵀ
                    let ga = acc(&mut grads[a.0], m * k);
                    F::gemm_acc(m, n, k, gout, n, 1, self.value(*b).data(), 1, n, ga, k, 1);
                }
                if self.tracked(*b) {
                    // gb = aᵀ · gout
                    let gb = acc(&mut grads[b.0], k * n);
                    F::gemm_acc(k, m, n, self.value(*a).data(), 1, k, gout, n, 1, gb, n, 1);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                if self.tracked(*a) {
                    // ga = gout · b
                    let ga = acc(&mut grads[a.0], m * k);
                    F::gemm_acc(m, n, k, gout, n, 1, self.value(*b).data(), k, 1, ga, k, 1);
                }
                if self.tracked(*b) {
                    // gb = goutᵀ · a
                    let gb = acc(&mut grads[b.0], n * k);
                    F::gemm_acc(n, m, k, gout, 1, n, self.value(*a).data(), k, 1, gb, k, 1);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.tracked(*v) {
                        let g = acc(&mut grads[v.0], gout.len());
                        g.iter_mut().zip(gout).for_each(|(g, &o)| *g += o);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.tracked(*v) {
                        let ov = self.value(*other).data();
                        let g = acc(&mut grads[v.0], gout.len());
                        for ((g, &o), &w) in g.iter_mut().zip(gout).zip(ov) {
                            *g += o * w;
                        }
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.tracked(*x) {
                    let g = acc(&mut grads[x.0], gout.len());
                    g.iter_mut().zip(gout).for_each(|(g, &o)| *g += o);
                }
                if self.tracked(*bias) {
                    let c = numel(*bias);
                    let g = acc(&mut grads[bias.0], c);
                    for row in gout.chunks_exact(c) {
                        g.iter_mut().zip(row).for_each(|(g, &o)| *g += o);
                    }
                }
            }
            Op::MulRow(x, scale) => {
                let c = numel(*scale);
                if self.tracked(*x) {
                    let s = self.value(*scale).data();
                    let g = acc(&mut grads[x.0], gout.len());
                    for (grow, orow) in g.chunks_exact_mut(c).zip(gout.chunks_exact(c)) {
                        for ((g, &o), &w) in grow.iter_mut().zip(orow).zip(s) {
                            *g += o * w;
                        }
                    }
                }
                if self.tracked(*scale) {
                    let xv = self.value(*x).data();
                    let g = acc(&mut grads[scale.0], c);
                    for (xrow, orow) in xv.chunks_exact(c).zip(gout.chunks_exact(c)) {
                        for ((g, &o), &w) in g.iter_mut().zip(orow).zip(xrow) {
                            *g += o * w;
                        }
                    }
                }
            }
            Op::Scale(x, factor) => {
                let g = acc(&mut grads[x.0], gout.len());
                g.iter_mut().zip(gout).for_each(|(g, &o)| *g += o * *factor);
            }
            Op::Exp(x) => {
                let y = node.value.data();
                let g = acc(&mut grads[x.0], gout.len());
                for ((g, &o), &e) in g.iter_mut().zip(gout).zip(y) {
                    *g += o * e;
                }
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                let g = acc(&mut grads[x.0], gout.len());
                for ((g, &o), &v) in g.iter_mut().zip(gout).zip(xv) {
                    *g += o * ops::sigmoid_scalar(v);
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                let g = acc(&mut grads[x.0], gout.len());
                for ((g, &o), &v) in g.iter_mut().zip(gout).zip(xv) {
                    if v >= *lo && v <= *hi {
                        *g += o;
                    }
                }
            }
            Op::Gelu(x, mode) => {
                let xv = self.value(*x).data();
                let g = acc(&mut grads[x.0], gout.len());
                for ((g, &o), &v) in g.iter_mut().zip(gout).zip(xv) {
                    *g += o * ops::gelu_derivative(v, *mode);
                }
            }
            Op::Dropout(x, scales) => {
                let g = acc(&mut grads[x.0], gout.len());
                for ((g, &o), &s) in g.iter_mut().zip(gout).zip(scales) {
                    *g += o * s;
                }
            }
            Op::LayerNorm { x, gain, shift, stats } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let d = xv.cols();
                let inv_d = F::from_f64(1.0 / d as f64);
                if self.tracked(*gain) || self.tracked(*shift) {
                    let mut g_gain = vec![F::zero(); d];
                    let mut g_shift = vec![F::zero(); d];
                    for r in 0..xv.rows() {
                        let (mu, rs) = (stats.mean[r], stats.rstd[r]);
                        for (k, (&o, &v)) in gout[r * d..(r + 1) * d].iter().zip(xv.row(r)).enumerate() {
                            g_gain[k] += o * (v - mu) * rs;
                            g_shift[k] += o;
                        }
                    }
                    if self.tracked(*gain) {
                        let g = acc(&mut grads[gain.0], d);
                        g.iter_mut().zip(&g_gain).for_each(|(g, &v)| *g += v);
                    }
                    if self.tracked(*shift) {
                        let g = acc(&mut grads[shift.0], d);
                        g.iter_mut().zip(&g_shift).for_each(|(g, &v)| *g += v);
                    }
                }
                if self.tracked(*x) {
                    let g = acc(&mut grads[x.0], xv.numel());
                    let mut xhat = vec![F::zero(); d];
                    let mut gxhat = vec![F::zero(); d];
                    for r in 0..xv.rows() {
                        let (mu, rs) = (stats.mean[r], stats.rstd[r]);
                        for k in 0..d {
                            xhat[k] = (xv.row(r)[k] - mu) * rs;
                            gxhat[k] = gout[r * d + k] * gv[k];
                        }
                        let mean_g = gxhat.iter().copied().sum::<F>() * inv_d;
                        let mean_gx = gxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
                        for k in 0..d {
                            g[r * d + k] += rs * (gxhat[k] - mean_g - xhat[k] * mean_gx);
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let g = acc(&mut grads[x.0], gout.len());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gout[r * c..(r + 1) * c];
                    let inner: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for k in 0..c {
                        g[r * c + k] += yr[k] * (gr[k] - inner);
                    }
                }
            }
            Op::CrossEntropy(p, targets) => {
                let pv = self.value(*p);
                let c = pv.cols();
                let clamp = F::from_f64(ops::LOG_CLAMP);
                let scale = gout[0] / F::from_f64(targets.len().max(1) as f64);
                let g = acc(&mut grads[p.0], pv.numel());
                for (r, &t) in targets.iter().enumerate() {
                    let prob = pv.row(r)[t];
                    if prob > clamp {
                        g[r * c + t] -= scale / prob;
                    }
                }
            }
            Op::GatherRows(src, idx) => {
                let inner: usize = self.value(*src).shape()[1..].iter().product();
                let g = acc(&mut grads[src.0], numel(*src));
                for (k, &i) in idx.iter().enumerate() {
                    let dst = &mut g[i * inner..(i + 1) * inner];
                    dst.iter_mut()
                        .zip(&gout[k * inner..(k + 1) * inner])
                        .for_each(|(g, &o)| *g += o);
                }
            }
            Op::ReplaceRows { x, fill, positions } => {
                let c = numel(*fill);
                if self.tracked(*fill) {
                    let g = acc(&mut grads[fill.0], c);
                    for &pos in positions {
                        g.iter_mut()
                            .zip(&gout[pos * c..(pos + 1) * c])
                            .for_each(|(g, &o)| *g += o);
                    }
                }
                if self.tracked(*x) {
                    let mut masked = gout.to_vec();
                    for &pos in positions {
                        masked[pos * c..(pos + 1) * c].fill(F::zero());
                    }
                    let g = acc(&mut grads[x.0], gout.len());
                    g.iter_mut().zip(&masked).for_each(|(g, &o)| *g += o);
                }
            }
            Op::Sum(x) => {
                let g = acc(&mut grads[x.0], numel(*x));
                g.iter_mut().for_each(|g| *g += gout[0]);
            }
            Op::Reshape(x) => {
                let g = acc(&mut grads[x.0], gout.len());
                g.iter_mut().zip(gout).for_each(|(g, &o)| *g += o);
            }
            Op::Ssd {
                inputs,
                dims,
                segments,
                kernel,
            } => {
                let view = self.view(*dims, *inputs);
                let sg = match kernel {
                    SsdKernel::Naive => ssd::naive_backward(&view, segments, gout),
                    SsdKernel::Recurrent => ssd::scan_backward(&view, segments, gout, 1),
                    SsdKernel::Chunked(q) => ssd::scan_backward(&view, segments, gout, *q),
                };
                let parts = [sg.x, sg.a, sg.b, sg.c, sg.delta];
                for (v, part) in inputs.iter().zip(parts) {
                    if self.tracked(*v) {
                        let g = acc(&mut grads[v.0], part.len());
                        g.iter_mut().zip(&part).for_each(|(g, &o)| *g += o);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn param(t: Tensor<f64>) -> Tensor<f64> {
        t.with_requires_grad(true)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(Tensor::from_fn([2, 3], |i| i as f64)));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let xt = Tensor::from_fn([5], |i| i as f64 - 2.0);
        let x = tape.leaf(param(xt.clone()));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        let want: Vec<f64> = xt.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap(), &want[..]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(Tensor::<f64>::zeros([3])));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([2], 3.0));
        let w = tape.leaf(param(Tensor::full([2], 2.0)));
        let y = tape.mul(x, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap(), &[3.0, 3.0]);
    }

    /// Finite-difference check of a scalar function built on a fresh tape.
    fn check_grad(
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(param(t.clone()))).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
            for i in 0..t.numel() {
                let eval = |delta: f64| {
                    let mut moved = inputs.clone();
                    moved[k].data_mut()[i] += delta;
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = moved.iter().map(|t| tape.leaf(t.clone())).collect();
                    let out = build(&mut tape, &vars);
                    tape.value(out).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (analytic[i] - fd).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
                assert!(err < 1e-5, "input {k} coord {i}: analytic {} vs fd {fd}", analytic[i]);
            }
        }
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Weighted sum so every output coordinate contributes differently.
    fn weighted(tape: &mut Tape<f64>, y: Var) -> Var {
        let w = Tensor::from_fn(tape.shape(y).to_vec(), |i| ((i * 7 % 11) as f64 - 5.0) / 3.0);
        let w = tape.constant(w);
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn matmul_gradients() {
        check_grad(vec![rnd(&[3, 4], 1), rnd(&[4, 2], 2)], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            weighted(t, y)
        });
        check_grad(vec![rnd(&[3, 4], 3), rnd(&[5, 4], 4)], |t, v| {
            let y = t.matmul_bt(v[0], v[1]).unwrap();
            weighted(t, y)
        });
    }

    #[test]
    fn broadcast_and_elementwise_gradients() {
        check_grad(vec![rnd(&[3, 4], 5), rnd(&[4], 6)], |t, v| {
            let a = t.add_row(v[0], v[1]).unwrap();
            let b = t.mul_row(a, v[1]).unwrap();
            let c = t.exp(b);
            let d = t.softplus(c);
            let e = t.scale(d, -0.5);
            weighted(t, e)
        });
    }

    #[test]
    fn clamp_passes_gradient_only_inside() {
        check_grad(vec![rnd(&[5, 4], 7)], |t, v| {
            let c = t.clamp(v[0], -0.5, 0.7);
            weighted(t, c)
        });
        let mut tape = Tape::new();
        let x = tape.leaf(param(Tensor::new([3], vec![-2.0, 0.1, 3.0]).unwrap()));
        let c = tape.clamp(x, -1.0, 1.0);
        assert_eq!(tape.value(c).data(), &[-1.0, 0.1, 1.0]);
        let s = tape.sum(c);
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn gelu_gradients_both_modes() {
        for mode in [GeluMode::Tanh, GeluMode::Erf] {
            check_grad(vec![rnd(&[2, 5], 7)], move |t, v| {
                let y = t.gelu(v[0], mode);
                weighted(t, y)
            });
        }
    }

    #[test]
    fn layer_norm_gradients() {
        check_grad(vec![rnd(&[3, 6], 8), rnd(&[6], 9), rnd(&[6], 10)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted(t, y)
        });
    }

    #[test]
    fn softmax_cross_entropy_gradients() {
        check_grad(vec![rnd(&[4, 7], 11)], |t, v| {
            let p = t.softmax_rows(v[0]);
            t.cross_entropy(p, &[0, 6, 3, 3]).unwrap()
        });
    }

    #[test]
    fn gather_replace_gradients() {
        check_grad(vec![rnd(&[5, 3], 12), rnd(&[3], 13)], |t, v| {
            let g = t.gather_rows(v[0], &[4, 0, 0, 2]).unwrap();
            let r = t.replace_rows(g, v[1], &[1, 3]).unwrap();
            weighted(t, r)
        });
    }

    #[test]
    fn dropout_gradient_uses_same_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let x = tape.leaf(param(Tensor::full([1000], 1.0)));
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), tape.value(y).data());
    }
}
