//! Embeddings, stacked bidirectional SSD layers, last-position prediction and
//! the cross-entropy objective.
//!
//! One layer computes
//!
//! ```text
//! F' = F_fwd(h) + β · flip(F_bwd(flip(h))) + h
//! G  = Dropout(LN₁(F'))
//! H  = Dropout(LN₂(PFFN(G) + G))        PFFN(G) = Dropout(GELU(G·W₁ + b₁))·W₂ + b₂
//! ```
//!
//! where `flip` reverses every user segment and `F_*` is in-projection, packed
//! SSD mixing and out-projection. Parameter structs are generic over the slot
//! type so the same layout serves stored tensors and tape handles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::NamedTensors;
use crate::error::{Error, Result};
use crate::ops::GeluMode;
use crate::packing::PackedBatch;
use crate::real::Real;
use crate::ssd::{projection_block, SegmentBoundaries, SsdKernel, SsdProjectionParams, DEFAULT_CHUNK_LEN};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Model width `D`.
    pub dim: usize,
    /// SSM state size `N`.
    pub state_size: usize,
    pub layers: usize,
    /// Weight of the backward branch.
    pub beta: f64,
    /// Mask ratio.
    pub rho: f64,
    pub dropout: f64,
    /// Cap on input length plus target.
    pub max_len: usize,
    /// Inner width is `expand · dim`.
    pub expand: usize,
    /// Head width `P`, capped at the inner width.
    pub head_dim: usize,
    pub chunk_len: usize,
    /// Forward and backward branches use the same SSD block.
    pub share_backward: bool,
    /// `false` drops the backward branch entirely.
    pub bidirectional: bool,
    pub gelu: GeluMode,
    pub norm_eps: f64,
    pub embed_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 256,
            state_size: 64,
            layers: 2,
            beta: 0.1,
            rho: 0.1,
            dropout: 0.2,
            max_len: 200,
            expand: 2,
            head_dim: 64,
            chunk_len: DEFAULT_CHUNK_LEN,
            share_backward: true,
            bidirectional: true,
            gelu: GeluMode::Tanh,
            norm_eps: 1e-5,
            embed_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn inner_dim(&self) -> usize {
        self.expand * self.dim
    }

    pub fn head_width(&self) -> usize {
        self.head_dim.min(self.inner_dim())
    }

    pub fn heads(&self) -> usize {
        self.inner_dim() / self.head_width().max(1)
    }

    pub fn kernel(&self) -> SsdKernel {
        SsdKernel::Chunked(self.chunk_len)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("state_size", self.state_size),
            ("max_len", self.max_len),
            ("expand", self.expand),
            ("head_dim", self.head_dim),
            ("chunk_len", self.chunk_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must leave room for an input and a target".into()));
        }
        if !self.inner_dim().is_multiple_of(self.head_width()) {
            return Err(Error::Config(format!(
                "inner width {} is not a multiple of head_dim {}",
                self.inner_dim(),
                self.head_width()
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.norm_eps > 0.0) || !(self.embed_std > 0.0) {
            return Err(Error::Config("norm_eps and embed_std must be positive".into()));
        }
        Ok(())
    }
}

/// Item embeddings `Q` (`[V, D]`) and the mask embedding `m` (`[D]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ItemEmbeddingTable<T = Tensor<f32>> {
    pub items: T,
    pub mask: T,
}

impl<F: Real> ItemEmbeddingTable<Tensor<F>> {
    pub fn vocab_size(&self) -> usize {
        self.items.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiSsdLayerParams<T = Tensor<f32>> {
    pub ssd: SsdProjectionParams<T>,
    /// Separate backward block; `None` when shared or unidirectional.
    pub ssd_backward: Option<SsdProjectionParams<T>>,
    /// `[D, 4D]`
    pub w1: T,
    pub b1: T,
    /// `[4D, D]`
    pub w2: T,
    pub b2: T,
    pub norm1_gain: T,
    pub norm1_shift: T,
    pub norm2_gain: T,
    pub norm2_shift: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor<f32>> {
    pub embeddings: ItemEmbeddingTable<T>,
    pub layers: Vec<BiSsdLayerParams<T>>,
}

impl<T> BiSsdLayerParams<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> BiSsdLayerParams<U> {
        let ssd = self.ssd.map(&format!("{prefix}.ssd"), f);
        let ssd_backward = self.ssd_backward.as_ref().map(|p| p.map(&format!("{prefix}.ssd_backward"), f));
        let mut g = |name: &str, t: &T| f(&format!("{prefix}.{name}"), t);
        BiSsdLayerParams {
            ssd,
            ssd_backward,
            w1: g("ffn.w1", &self.w1),
            b1: g("ffn.b1", &self.b1),
            w2: g("ffn.w2", &self.w2),
            b2: g("ffn.b2", &self.b2),
            norm1_gain: g("norm1.gain", &self.norm1_gain),
            norm1_shift: g("norm1.shift", &self.norm1_shift),
            norm2_gain: g("norm2.gain", &self.norm2_gain),
            norm2_shift: g("norm2.shift", &self.norm2_shift),
        }
    }

    fn slots_mut(&mut self, prefix: &str) -> Vec<(String, &mut T)> {
        let mut out = self.ssd.slots_mut(&format!("{prefix}.ssd"));
        if let Some(b) = self.ssd_backward.as_mut() {
            out.extend(b.slots_mut(&format!("{prefix}.ssd_backward")));
        }
        for (name, slot) in [
            ("ffn.w1", &mut self.w1),
            ("ffn.b1", &mut self.b1),
            ("ffn.w2", &mut self.w2),
            ("ffn.b2", &mut self.b2),
            ("norm1.gain", &mut self.norm1_gain),
            ("norm1.shift", &mut self.norm1_shift),
            ("norm2.gain", &mut self.norm2_gain),
            ("norm2.shift", &mut self.norm2_shift),
        ] {
            out.push((format!("{prefix}.{name}"), slot));
        }
        out
    }

    fn slots(&self, prefix: &str) -> Vec<(String, &T)> {
        let mut out = self.ssd.slots(&format!("{prefix}.ssd"));
        if let Some(b) = self.ssd_backward.as_ref() {
            out.extend(b.slots(&format!("{prefix}.ssd_backward")));
        }
        for (name, slot) in [
            ("ffn.w1", &self.w1),
            ("ffn.b1", &self.b1),
            ("ffn.w2", &self.w2),
            ("ffn.b2", &self.b2),
            ("norm1.gain", &self.norm1_gain),
            ("norm1.shift", &self.norm1_shift),
            ("norm2.gain", &self.norm2_gain),
            ("norm2.shift", &self.norm2_shift),
        ] {
            out.push((format!("{prefix}.{name}"), slot));
        }
        out
    }
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            embeddings: ItemEmbeddingTable {
                items: f("embeddings.items", &self.embeddings.items),
                mask: f("embeddings.mask", &self.embeddings.mask),
            },
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("layers.{i}"), f))
                .collect(),
        }
    }

    /// Every parameter with its archive name, in a fixed order.
    pub fn slots(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("embeddings.items".to_string(), &self.embeddings.items),
            ("embeddings.mask".to_string(), &self.embeddings.mask),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.slots(&format!("layers.{i}")));
        }
        out
    }

    pub fn slots_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![
            ("embeddings.items".to_string(), &mut self.embeddings.items),
            ("embeddings.mask".to_string(), &mut self.embeddings.mask),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.slots_mut(&format!("layers.{i}")));
        }
        out
    }
}

impl<F: Real> ModelParams<Tensor<F>> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, vocab: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if vocab == 0 {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let d = cfg.dim;
        let embeddings = ItemEmbeddingTable {
            items: Tensor::randn([vocab, d], cfg.embed_std, rng),
            mask: Tensor::randn([d], cfg.embed_std, rng),
        };
        let (heads, p, n) = (cfg.heads(), cfg.head_width(), cfg.state_size);
        let layers = (0..cfg.layers)
            .map(|_| {
                let ssd = SsdProjectionParams::init(d, heads, p, n, rng);
                let ssd_backward = (cfg.bidirectional && !cfg.share_backward)
                    .then(|| SsdProjectionParams::init(d, heads, p, n, rng));
                BiSsdLayerParams {
                    ssd,
                    ssd_backward,
                    w1: Tensor::randn([d, 4 * d], 1.0 / (d as f64).sqrt(), rng),
                    b1: Tensor::zeros([4 * d]),
                    w2: Tensor::randn([4 * d, d], 1.0 / (4.0 * d as f64).sqrt(), rng),
                    b2: Tensor::zeros([d]),
                    norm1_gain: Tensor::full([d], F::one()),
                    norm1_shift: Tensor::zeros([d]),
                    norm2_gain: Tensor::full([d], F::one()),
                    norm2_shift: Tensor::zeros([d]),
                }
            })
            .collect();
        Ok(ModelParams { embeddings, layers })
    }

    pub fn parameter_count(&self) -> usize {
        self.slots().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<G: Real>(&self) -> ModelParams<Tensor<G>> {
        self.map(&mut |_, t| t.cast())
    }

    /// Binds every parameter to `tape` as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape<F>, track: bool) -> ModelParams<Var> {
        self.map(&mut |_, t| {
            if track {
                tape.leaf(t.detached().with_requires_grad(true))
            } else {
                tape.constant(t.detached())
            }
        })
    }

    pub fn to_named(&self) -> NamedTensors {
        self.slots().into_iter().map(|(n, t)| (n, t.cast())).collect()
    }

    /// Overwrites every parameter from an archive; names and shapes must match
    /// exactly.
    pub fn load_named(&mut self, named: NamedTensors) -> Result<()> {
        let mut by_name: std::collections::BTreeMap<String, Tensor<f32>> = named.into_iter().collect();
        for (name, slot) in self.slots_mut() {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("tensor '{name}' is missing from the checkpoint")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor '{name}' has shape {:?}, the model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.cast();
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("tensor '{extra}' is not part of this model")));
        }
        Ok(())
    }
}

/// Handles produced by one forward pass on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[ΣL, D]` output of the last layer.
    pub hidden: Var,
    /// `[K, D]`
    pub preferences: Var,
    /// `[K, V]`
    pub logits: Var,
    pub probabilities: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput<F: Real = f32> {
    pub preferences: Tensor<F>,
    pub logits: Tensor<F>,
    pub probabilities: Tensor<F>,
}

fn dropout<F: Real, R: Rng + ?Sized>(
    tape: &mut Tape<F>,
    x: Var,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    tape.dropout(x, cfg.dropout, training, rng)
}

pub fn bi_ssd_layer_on_tape<F: Real, R: Rng + ?Sized>(
    tape: &mut Tape<F>,
    h: Var,
    boundaries: &SegmentBoundaries,
    p: &BiSsdLayerParams<Var>,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let heads = cfg.heads();
    let fwd = projection_block(tape, h, &p.ssd, heads, boundaries, cfg.kernel())?;
    let mut mixed = tape.add(fwd, h)?;
    if cfg.bidirectional {
        let flip = boundaries.flip_permutation();
        let hf = tape.gather_rows(h, &flip)?;
        let block = p.ssd_backward.as_ref().unwrap_or(&p.ssd);
        let bwd = projection_block(tape, hf, block, heads, boundaries, cfg.kernel())?;
        let bwd = tape.gather_rows(bwd, &flip)?;
        let bwd = tape.scale(bwd, F::from_f64(cfg.beta));
        mixed = tape.add(mixed, bwd)?;
    }
    let g = tape.layer_norm(mixed, p.norm1_gain, p.norm1_shift, cfg.norm_eps)?;
    let g = dropout(tape, g, cfg, training, rng)?;

    let u = tape.matmul(g, p.w1)?;
    let u = tape.add_row(u, p.b1)?;
    let u = tape.gelu(u, cfg.gelu);
    let u = dropout(tape, u, cfg, training, rng)?;
    let u = tape.matmul(u, p.w2)?;
    let u = tape.add_row(u, p.b2)?;
    let r = tape.add(u, g)?;
    let out = tape.layer_norm(r, p.norm2_gain, p.norm2_shift, cfg.norm_eps)?;
    dropout(tape, out, cfg, training, rng)
}

/// Embedding lookup with masking, the layer stack, last-position selection and
/// scoring against the tied item table.
pub fn forward_on_tape<F: Real, R: Rng + ?Sized>(
    tape: &mut Tape<F>,
    params: &ModelParams<Var>,
    batch: &PackedBatch<F>,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<ForwardVars> {
    let table = &params.embeddings;
    let mut h = tape.gather_rows(table.items, &batch.item_ids)?;
    if !batch.mask_positions.is_empty() {
        h = tape.replace_rows(h, table.mask, &batch.mask_positions)?;
    }
    for layer in &params.layers {
        h = bi_ssd_layer_on_tape(tape, h, &batch.boundaries, layer, cfg, training, rng)?;
    }
    let preferences = tape.gather_rows(h, &batch.boundaries.last_positions())?;
    let logits = tape.matmul_bt(preferences, table.items)?;
    let probabilities = tape.softmax_rows(logits);
    Ok(ForwardVars {
        hidden: h,
        preferences,
        logits,
        probabilities,
    })
}

/// One Bi-SSD layer on plain tensors.
pub fn bi_ssd_layer<F: Real, R: Rng + ?Sized>(
    h: &Tensor<F>,
    boundaries: &SegmentBoundaries,
    params: &BiSsdLayerParams<Tensor<F>>,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.detached());
    let bound = params.map("layer", &mut |_, t| tape.constant(t.detached()));
    let out = bi_ssd_layer_on_tape(&mut tape, hv, boundaries, &bound, cfg, training, rng)?;
    Ok(tape.value(out).detached())
}

pub fn model_forward<F: Real, R: Rng + ?Sized>(
    batch: &PackedBatch<F>,
    params: &ModelParams<Tensor<F>>,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<PredictionOutput<F>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let v = forward_on_tape(&mut tape, &bound, batch, cfg, training, rng)?;
    Ok(PredictionOutput {
        preferences: tape.value(v.preferences).detached(),
        logits: tape.value(v.logits).detached(),
        probabilities: tape.value(v.probabilities).detached(),
    })
}

/// Mean cross entropy of the predicted distributions.
pub fn training_loss<F: Real>(output: &PredictionOutput<F>, targets: &[usize]) -> Result<Tensor<F>> {
    crate::ops::cross_entropy(&output.probabilities, targets)
}

/// Loss value and the gradient of every parameter, in [`ModelParams::slots`]
/// order. Parameters that do not reach the loss get `None`.
pub fn loss_and_gradients<F: Real, R: Rng + ?Sized>(
    params: &ModelParams<Tensor<F>>,
    batch: &PackedBatch<F>,
    targets: &[usize],
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<(F, Vec<Option<Vec<F>>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let v = forward_on_tape(&mut tape, &bound, batch, cfg, training, rng)?;
    let loss = tape.cross_entropy(v.probabilities, targets)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let out = bound.slots().into_iter().map(|(_, var)| grads.take(*var)).collect();
    Ok((value, out))
}
