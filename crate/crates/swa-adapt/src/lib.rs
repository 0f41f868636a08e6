//! Desk-scale decoder-only transformer engine and experiment harness for
//! adapting full-attention models to sliding-window attention.
//!
//! The engine implements phase-aware masks (windowed prefill with
//! full-attention decode), retained sink tokens, per-layer FA/SWA
//! interleaving, low-rank fine-tuning with self-distillation, a lazy-ratio
//! layer ranker, and an analytic cost model, together with synthetic
//! long-context retrieval tasks and a benchmarking harness.
//!
//! Start from the runnable examples (`cargo run --release --example ...`) or
//! the `swa-adapt` CLI; the modules below are the library surface.

pub mod attention;
pub mod model;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod harness;
pub mod kv;
pub mod layer_select;
pub mod mask;
pub mod report;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use attention::{attend_blocked, attend_naive, AttentionInputs, FlopLedger};
pub use error::{Error, Result};
pub use kv::{FootprintReport, KvCache};
pub use mask::{equivalent_to_full, AttentionPolicy, MaskView, Window};
pub use model::{LoraAdapters, LoraTargets, ModelConfig, ToyTransformer, Weights};
pub use tensor::{masked_row_softmax, rms_norm, rope_apply, Scalar, Tensor2D};
