use serde::{Deserialize, Serialize};

use crate::error::{Result, SilqError};

/// Geometry of the decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rotary: bool,
    pub rope_theta: f32,
    pub norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: crate::io::corpus::VOCAB_SIZE,
            max_seq_len: 128,
            rotary: true,
            rope_theta: 10_000.0,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(SilqError::Config(format!("{name} must be positive")));
        }
        if self.vocab_size < 2 {
            return Err(SilqError::Config("vocab_size must be at least 2".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(SilqError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.rotary && self.head_dim() % 2 != 0 {
            return Err(SilqError::Config(
                "rotary embeddings need an even head dimension".into(),
            ));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(SilqError::Config("norm_eps must be non-negative".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
