//! Decoder-only backbone shared by text tokens and series patches.

mod forward;
mod params;

pub use forward::{forward, forward_cached, KvCache, SequenceLayout, Slot};
pub use params::{init_params, Layer, ModelParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// Patch length P.
    pub patch_size: usize,
    /// Number of quantile levels Q.
    pub n_quantiles: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub softcap_alpha: f64,
    /// Longest sequence (positions) the model accepts.
    pub max_seq: usize,
    pub tie_embeddings: bool,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            patch_size: 8,
            n_quantiles: 21,
            vocab_size: 4096,
            rope_base: 5e5,
            softcap_alpha: 15.0,
            max_seq: 256,
            tie_embeddings: true,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// The 16-layer, d=1024 configuration.
    pub fn large() -> Self {
        Self {
            n_layers: 16,
            d_model: 1024,
            n_q_heads: 8,
            n_kv_heads: 4,
            head_dim: 128,
            patch_size: 32,
            vocab_size: 131_072,
            max_seq: 4096,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.patch_size == 0 || self.n_quantiles == 0 {
            return bad("n_layers, d_model, patch_size and n_quantiles must be positive".into());
        }
        if self.n_kv_heads == 0 || self.n_q_heads % self.n_kv_heads != 0 {
            return bad(format!(
                "n_q_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_q_heads, self.n_kv_heads
            ));
        }
        if self.head_dim * self.n_q_heads != self.d_model {
            return bad(format!(
                "head_dim * n_q_heads = {} but d_model = {}",
                self.head_dim * self.n_q_heads,
                self.d_model
            ));
        }
        if self.head_dim % 2 != 0 {
            return bad(format!("head_dim must be even for rotary embeddings, got {}", self.head_dim));
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return bad("vocab_size and max_seq must be positive".into());
        }
        if !(self.softcap_alpha > 0.0) || !(self.rope_base > 0.0) || !(self.norm_eps >= 0.0) {
            return bad("softcap_alpha and rope_base must be positive, norm_eps non-negative".into());
        }
        Ok(())
    }

    /// `ceil(8d/3)` rounded up to a multiple of 256.
    pub fn mlp_hidden(&self) -> usize {
        (8 * self.d_model).div_ceil(3).div_ceil(256) * 256
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn feature_width(&self) -> usize {
        4 * self.patch_size
    }

    pub fn quantile_width(&self) -> usize {
        self.patch_size * self.n_quantiles
    }
}
