//! Joint text + time-series decoder-only transformer, built from scratch.
//!
//! Text tokens and time-series patches share one residual stream. The crate
//! covers the whole loop: byte-level BPE, patch codec, backbone with
//! grouped-query attention, quantile and language-model objectives,
//! Muon/AdamW optimization, synthetic series generation, two-stage
//! training, autoregressive forecasting, frozen embeddings and metrics.

pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
