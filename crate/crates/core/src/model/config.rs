//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trainable-surface selection: either all block matrices train, or only
/// low-rank adapter factors attached to the attention projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    Full,
    LowRank,
}

impl AdapterMode {
    pub fn parse(s: &str) -> Option<AdapterMode> {
        match s {
            "full" => Some(AdapterMode::Full),
            "low-rank" | "low_rank" | "lowrank" => Some(AdapterMode::LowRank),
            _ => None,
        }
    }
}

/// Shape and initialization parameters of the micro transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    /// Feed-forward width; defaults to 4 × `model_dim`.
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub adapter_mode: AdapterMode,
    /// Rank of the adapter factors; only used in low-rank mode.
    pub adapter_rank: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Convenience constructor with `ffn_dim = 4 * model_dim`, full mode.
    pub fn new(num_layers: usize, model_dim: usize, num_heads: usize, vocab_size: usize, max_seq_len: usize, seed: u64) -> Self {
        ModelConfig {
            num_layers,
            model_dim,
            num_heads,
            ffn_dim: 4 * model_dim,
            vocab_size,
            max_seq_len,
            adapter_mode: AdapterMode::Full,
            adapter_rank: 8,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
            Ok(())
        }
        positive("num_layers", self.num_layers)?;
        positive("model_dim", self.model_dim)?;
        positive("num_heads", self.num_heads)?;
        positive("ffn_dim", self.ffn_dim)?;
        positive("vocab_size", self.vocab_size)?;
        positive("max_seq_len", self.max_seq_len)?;
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads ({}) must divide model_dim ({})",
                self.num_heads, self.model_dim
            )));
        }
        if self.adapter_mode == AdapterMode::LowRank {
            positive("adapter_rank", self.adapter_rank)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig::new(1, 8, 3, 10, 16, 0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn default_ffn_is_four_d() {
        let cfg = ModelConfig::new(2, 16, 4, 10, 16, 0);
        assert_eq!(cfg.ffn_dim, 64);
        assert!(cfg.validate().is_ok());
    }
}
