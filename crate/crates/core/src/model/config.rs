use serde::{Deserialize, Serialize};

use super::ModelError;

/// Shape of the toy transcriber.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Includes PAD, BOS and EOS.
    pub vocab_size: usize,
    pub max_audio_frames: usize,
    pub max_token_len: usize,
    pub ffn_dim: usize,
    /// Residual dropout on every sublayer output, train mode only.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            hidden_dim: 32,
            num_heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            vocab_size: crate::synthdata::VOCAB_SIZE,
            max_audio_frames: 64,
            max_token_len: 24,
            ffn_dim: 64,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.vocab_size < 4 {
            return fail(format!("vocab_size must be at least 4, got {}", self.vocab_size));
        }
        if self.max_audio_frames < 1 || self.max_token_len < 1 {
            return fail("max_audio_frames and max_token_len must be positive".into());
        }
        if self.feature_dim == 0 || self.ffn_dim == 0 {
            return fail("feature_dim and ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Low-rank adapter hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            dropout: 0.1,
        }
    }
}

impl LoraConfig {
    /// rank 8, alpha 8, dropout 0.5.
    pub fn large_scale() -> Self {
        Self {
            rank: 8,
            alpha: 8.0,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rank == 0 {
            return Err(ModelError::Config("LoRA rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "LoRA dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}
