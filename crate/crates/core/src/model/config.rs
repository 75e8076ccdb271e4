use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::TensorShape;

/// Architecture hyperparameters. Every weight dimension follows from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub shape: TensorShape,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_decoder_layers: usize,
    /// Number of (linear, GELU) blocks ahead of the head's final linear.
    pub n_head_layers: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub cond_max_len: usize,
    pub log_var_clamp: (f64, f64),
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            shape: TensorShape {
                channels: 1,
                height: 8,
                width: 8,
                patch_size: 2,
            },
            d_model: 256,
            n_heads: 8,
            n_decoder_layers: 1,
            n_head_layers: 1,
            ffn_mult: 4,
            vocab_size: 16,
            cond_max_len: 8,
            log_var_clamp: (-10.0, 10.0),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration worth gradient-checking: one 4x4 channel in
    /// 2x2 patches, width 8, two heads.
    pub fn tiny() -> Self {
        Self {
            shape: TensorShape {
                channels: 1,
                height: 4,
                width: 4,
                patch_size: 2,
            },
            d_model: 8,
            n_heads: 2,
            vocab_size: 4,
            cond_max_len: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_decoder_layers == 0 {
            return bad("n_decoder_layers must be at least 1".into());
        }
        if self.n_head_layers == 0 {
            return bad("n_head_layers must be at least 1".into());
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be at least 1".into());
        }
        if self.vocab_size == 0 || self.cond_max_len == 0 {
            return bad("vocab_size and cond_max_len must be at least 1".into());
        }
        let (lo, hi) = self.log_var_clamp;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return bad(format!("log-variance clamp ({lo}, {hi}) must satisfy lo < hi"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

/// Control signal: a short sequence of integer tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub tokens: Vec<u32>,
}

impl Condition {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self { tokens }
    }

    pub fn single(token: u32) -> Self {
        Self {
            tokens: vec![token],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab_size: usize, max_len: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Input("condition has no tokens".into()));
        }
        if self.tokens.len() > max_len {
            return Err(Error::Input(format!(
                "condition has {} tokens, limit is {max_len}",
                self.tokens.len()
            )));
        }
        if let Some(&token) = self.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::TokenOutOfVocab { token, vocab_size });
        }
        Ok(())
    }
}

/// Self-attention masking. `Unmasked` exists only so audits can prove they
/// catch a leaking decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMask {
    #[default]
    Causal,
    Unmasked,
}
