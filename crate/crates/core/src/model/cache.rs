use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use super::ops::{attention, gelu, layer_norm, linear, Segment};
use super::{Condition, ModelState};
use crate::error::{Error, Result};
use crate::gaussian::GaussianParams;
use crate::Scalar;

/// Projected self-attention keys/values of the positions decoded so far,
/// plus the condition's cross-attention keys/values, per layer.
#[derive(Debug, Clone, Default)]
pub struct KvCache<T> {
    condition: Vec<u32>,
    cross: Vec<(Array2<T>, Array2<T>)>,
    keys: Vec<Array2<T>>,
    values: Vec<Array2<T>>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new() -> Self {
        Self {
            condition: Vec::new(),
            cross: Vec::new(),
            keys: Vec::new(),
            values: Vec::new(),
            len: 0,
        }
    }

    /// Decoder positions held, start token included.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        *self = Self::new();
    }
}

impl<T: Scalar> ModelState<T> {
    /// Parameters of patch `prefix.nrows() + 1` given the patches before it.
    ///
    /// A cache is reused only when it was built for the same condition from
    /// a prefix of `prefix`; it is then extended in place. Any other cache
    /// is rebuilt from scratch.
    pub fn forward_incremental(
        &self,
        prefix: ArrayView2<'_, T>,
        c: &Condition,
        cache: Option<&mut KvCache<T>>,
    ) -> Result<GaussianParams<T>> {
        self.check_input(prefix, c).map_err(|e| match e {
            Error::Shape(_) => Error::Input(format!(
                "prefix of {} patches is too long for a {}-patch model",
                prefix.nrows(),
                self.config.shape.num_patches()
            )),
            other => other,
        })?;
        let mut local = KvCache::new();
        let cache = cache.unwrap_or(&mut local);
        if cache.condition != c.tokens || cache.len > prefix.nrows() || cache.cross.len() != self.weights.layers.len() {
            self.reset_cache(cache, c)?;
        }

        let cfg = &self.config;
        let w = &self.weights;
        let first = cache.len;
        let last = prefix.nrows();
        let n_new = last + 1 - first;
        let mut x = self.positional.slice(s![first..=last, ..]).to_owned();
        let patch_from = first.max(1);
        if patch_from <= last {
            let emb = linear(prefix.slice(s![patch_from - 1..last, ..]), &w.patch_embed);
            x.slice_mut(s![patch_from - first.., ..]).scaled_add(T::one(), &emb);
        }
        if first == 0 {
            x.row_mut(0).scaled_add(T::one(), &w.start_token);
        }

        for (l, layer) in w.layers.iter().enumerate() {
            let (a1, _) = layer_norm(x.view(), &layer.self_norm);
            let q = linear(a1.view(), &layer.self_attn.query);
            let k_new = linear(a1.view(), &layer.self_attn.key);
            let v_new = linear(a1.view(), &layer.self_attn.value);
            cache.keys[l] = concatenate(Axis(0), &[cache.keys[l].view(), k_new.view()]).expect("matching widths");
            cache.values[l] = concatenate(Axis(0), &[cache.values[l].view(), v_new.view()]).expect("matching widths");
            let seg = [Segment {
                q: 0..n_new,
                k: 0..first + n_new,
            }];
            let (ctx, _) = attention(q.view(), cache.keys[l].view(), cache.values[l].view(), &seg, cfg.n_heads, true);
            x += &linear(ctx.view(), &layer.self_attn.output);

            let (a2, _) = layer_norm(x.view(), &layer.cross_norm);
            let q2 = linear(a2.view(), &layer.cross_attn.query);
            let (ck, cv) = &cache.cross[l];
            let seg = [Segment {
                q: 0..n_new,
                k: 0..ck.nrows(),
            }];
            let (ctx2, _) = attention(q2.view(), ck.view(), cv.view(), &seg, cfg.n_heads, false);
            x += &linear(ctx2.view(), &layer.cross_attn.output);

            let (a3, _) = layer_norm(x.view(), &layer.ffn_norm);
            x += &linear(gelu(&linear(a3.view(), &layer.ffn_in)).view(), &layer.ffn_out);
        }
        cache.len = last + 1;

        let raw = self.head_forward(x.slice(s![n_new - 1..n_new, ..]));
        Ok(self.split_head(raw.row(0).to_owned()))
    }

    fn reset_cache(&self, cache: &mut KvCache<T>, c: &Condition) -> Result<()> {
        let enc = self.encode_condition(c)?;
        let d = self.config.d_model;
        cache.condition = c.tokens.clone();
        cache.cross = self
            .weights
            .layers
            .iter()
            .map(|l| (linear(enc.view(), &l.cross_attn.key), linear(enc.view(), &l.cross_attn.value)))
            .collect();
        cache.keys = vec![Array2::zeros((0, d)); self.weights.layers.len()];
        cache.values = cache.keys.clone();
        cache.len = 0;
        Ok(())
    }
}
