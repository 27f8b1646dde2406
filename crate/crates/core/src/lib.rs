//! Padding-free sequential recommendation built on bidirectional structured
//! state space duality (SSD) layers.
//!
//! * [`tensor`], [`ops`], [`autograd`], [`optim`], [`checkpoint`]: dense math,
//!   reverse-mode differentiation, Adam and the parameter archive.
//! * [`ssd`]: the SSD mixer with naive, recurrent, chunked and packed kernels.
//! * [`packing`]: variable-length batches with segment boundaries and masking.
//! * [`model`]: embeddings, stacked bidirectional SSD layers, prediction, loss.
//! * [`data`]: interaction logs, k-core filtering, leave-one-out splits, batches.
//! * [`train`]: training loop and full-catalog ranking metrics.
//! * [`bench`]: FLOP accounting, attention baseline and scaling measurements.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod ops;
pub mod model;
pub mod optim;
pub mod packing;
pub mod real;
pub mod ssd;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
