//! Progressive multimodal alignment.
//!
//! Frozen modality-specific encoders produce token sequences. A single
//! trainable transformer, the universal projection, maps any modality into a
//! shared embedding space once the sequence has been fused with a learnable
//! modality token. The first two modalities train the projection jointly
//! with a soft-target contrastive loss; every later modality freezes the
//! projection and trains only a small per-token alignment MLP and its own
//! token against one already-aligned "bridge" modality.
//!
//! Modules:
//! - [`compute`]: tensors, kernels, parameters, reverse-mode tape
//! - [`model`]: fusion, universal projection, alignment layer, pooling, VQA head
//! - [`loss`]: soft-target symmetric InfoNCE and cross-entropy
//! - [`data`]: frozen encoders, synthetic worlds, feature files, batching
//! - [`pipeline`]: stage-1 / stage-2 / VQA training, AdamW, checkpoints
//! - [`eval`]: retrieval metrics, zero-shot classification, WUPS, reports

pub mod compute;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod pipeline;

pub use compute::{ParamStore, Parameter, RngStream, Tensor};
pub use error::{Error, Result};
pub use model::{FusionMode, ModalityRegistry, ModelState, Pooling, UpConfig};
pub use pipeline::{Checkpoint, TrainConfig};

/// A length-`L` sequence of `D`-dimensional feature vectors, stored as an
/// `[L, D]` tensor.
pub type TokenSequence = Tensor;

/// One pooled `D`-vector per row.
pub type Embeddings = Tensor;
