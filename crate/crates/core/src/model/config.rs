use serde::{Deserialize, Serialize};

use crate::error::{GlabError, Result};

/// Architecture of the decoder-only GQA transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    /// Eight layers with a 4:1 query-to-KV head ratio, small enough to train
    /// on a CPU in minutes.
    pub fn toy() -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 64,
            n_q_heads: 8,
            n_kv_heads: 2,
            d_head: 8,
            d_ff: 128,
            vocab_size: 64,
            rope_base: 10_000.0,
            max_seq_len: 64,
        }
    }

    /// Llama 3.1 8B dimensions. Used for parameter accounting only.
    pub fn llama3_8b() -> Self {
        ModelConfig {
            n_layers: 32,
            d_model: 4096,
            n_q_heads: 32,
            n_kv_heads: 8,
            d_head: 128,
            d_ff: 14336,
            vocab_size: 128_256,
            rope_base: 500_000.0,
            max_seq_len: 131_072,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GlabError::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return fail(format!("zero-sized dimension in {self:?}"));
        }
        if self.n_q_heads == 0 || self.n_kv_heads == 0 {
            return fail("head counts must be positive".into());
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return fail(format!(
                "n_q_heads {} is not a multiple of n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            ));
        }
        if self.n_q_heads * self.d_head != self.d_model {
            return fail(format!(
                "n_q_heads * d_head = {} but d_model = {}",
                self.n_q_heads * self.d_head,
                self.d_model
            ));
        }
        if self.d_head == 0 || !self.d_head.is_multiple_of(2) {
            return fail(format!("d_head must be even and positive, got {}", self.d_head));
        }
        if !(self.rope_base > 0.0) || !self.rope_base.is_finite() {
            return fail(format!("rope_base must be positive, got {}", self.rope_base));
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn q_width(&self) -> usize {
        self.n_q_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }
}

/// The KV head that query head `q_head` reads from.
pub fn kv_head_of(q_head: usize, config: &ModelConfig) -> Result<usize> {
    if q_head >= config.n_q_heads {
        return Err(GlabError::Contract(format!(
            "query head {q_head} out of range for {} heads",
            config.n_q_heads
        )));
    }
    Ok(q_head / config.group_size())
}
