//! The autoregressive noise prior: embeddings, masked decoder with
//! cross-attention to the condition, and the diagonal-Gaussian head.

mod cache;
pub mod checkpoint;
mod config;
pub(crate) mod forward;
pub(crate) mod ops;
mod weights;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};

pub use cache::KvCache;
pub use config::{AttentionMask, Condition, ModelConfig};
pub use weights::{Attention, DecoderLayer, Head, LayerNorm, Linear, NamedTensor, Weights};

use crate::error::Result;
use crate::gaussian::GaussianParams;
use crate::patch::PatchSequence;
use crate::Scalar;

/// Configuration plus learnable weights. Immutable during inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub weights: Weights<T>,
    /// Fixed sinusoidal rows, shared by decoder positions and condition
    /// positions.
    pub positional: Array2<T>,
    pub mask: AttentionMask,
}

impl<T: Scalar> ModelState<T> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config);
        Ok(Self::from_weights(config, weights))
    }

    pub(crate) fn from_weights(config: ModelConfig, weights: Weights<T>) -> Self {
        let len = (config.shape.num_patches() + 1).max(config.cond_max_len);
        let positional = ops::sinusoidal_table(len, config.d_model);
        Self {
            config,
            weights,
            positional,
            mask: AttentionMask::Causal,
        }
    }

    /// Same weights with a different self-attention mask.
    pub fn with_mask(mut self, mask: AttentionMask) -> Self {
        self.mask = mask;
        self
    }

    /// Table lookup plus positional row per token, `len × d_model`.
    pub fn encode_condition(&self, c: &Condition) -> Result<Array2<T>> {
        c.validate(self.config.vocab_size, self.config.cond_max_len)?;
        let mut enc = self
            .weights
            .cond_embed
            .select(Axis(0), &c.tokens.iter().map(|&t| t as usize).collect::<Vec<_>>());
        enc += &self.positional.slice(s![..c.len(), ..]);
        Ok(enc)
    }

    /// Parameters for every patch given the ground-truth prefix before it.
    pub fn forward_teacher_forced(
        &self,
        s: &PatchSequence<T>,
        c: &Condition,
    ) -> Result<Vec<GaussianParams<T>>> {
        self.check_sequence(s)?;
        let m = s.len();
        let inputs = s.patches.slice(s![..m - 1, ..]);
        let trace = self.forward_traced(&[(inputs, c)])?;
        Ok(self.rows_to_params(&trace, 0..m))
    }

    /// Teacher-forced parameters for raw patch rows, which may be shorter
    /// than a full sequence. Returns `patches.nrows() + 1` predictions.
    pub fn forward_prefix(
        &self,
        patches: ArrayView2<'_, T>,
        c: &Condition,
    ) -> Result<Vec<GaussianParams<T>>> {
        let trace = self.forward_traced(&[(patches, c)])?;
        Ok(self.rows_to_params(&trace, 0..patches.nrows() + 1))
    }

    pub(crate) fn check_sequence(&self, s: &PatchSequence<T>) -> Result<()> {
        if s.shape != self.config.shape || s.patches.dim() != (s.shape.num_patches(), s.shape.patch_len()) {
            return Err(crate::Error::Shape(format!(
                "sequence shape {:?} does not match model shape {:?}",
                s.shape, self.config.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn rows_to_params(
        &self,
        trace: &forward::Trace<T>,
        rows: std::ops::Range<usize>,
    ) -> Vec<GaussianParams<T>> {
        let means = trace.means();
        let log_vars = trace.log_vars(self.config.log_var_clamp);
        rows.map(|r| GaussianParams {
            mean: means.row(r).to_owned(),
            log_var: log_vars.row(r).to_owned(),
        })
        .collect()
    }

    /// Maps one decoder output vector through the head: the first `K`
    /// outputs are means, the last `K` clamped log-variances.
    pub fn predict_params(&self, hidden: ArrayView1<'_, T>) -> Result<GaussianParams<T>> {
        if hidden.len() != self.config.d_model {
            return Err(crate::Error::Shape(format!(
                "hidden vector has {} entries, d_model is {}",
                hidden.len(),
                self.config.d_model
            )));
        }
        let raw = self.head_forward(hidden.insert_axis(Axis(0)));
        Ok(self.split_head(raw.row(0).to_owned()))
    }
}
