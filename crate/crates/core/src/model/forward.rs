//! Batched teacher-forced pass that keeps every intermediate, and its exact
//! reverse-mode gradient.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};

use super::ops::{
    attention, attention_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, linear,
    linear_backward, linear_backward_params, AttnProbs, NormCache, Segment,
};
use super::{AttentionMask, Condition, ModelState, Weights};
use crate::error::{Error, Result};
use crate::Scalar;

/// One decoder input: the patches fed after the start token (`n × K`,
/// possibly empty) and the condition. It yields `n + 1` predictions.
pub(crate) type SeqInput<'a, T> = (ArrayView2<'a, T>, &'a Condition);

struct LayerTrace<T> {
    self_norm: NormCache<T>,
    a1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    self_probs: AttnProbs<T>,
    ctx: Array2<T>,
    cross_norm: NormCache<T>,
    a2: Array2<T>,
    q2: Array2<T>,
    k2: Array2<T>,
    v2: Array2<T>,
    cross_probs: AttnProbs<T>,
    ctx2: Array2<T>,
    ffn_norm: NormCache<T>,
    a3: Array2<T>,
    f_pre: Array2<T>,
    f_act: Array2<T>,
}

/// Intermediates of [`ModelState::forward_traced`].
pub(crate) struct Trace<T> {
    /// Token rows of each sequence; row `start` is the start token.
    pub rows: Vec<std::ops::Range<usize>>,
    self_segments: Vec<Segment>,
    cross_segments: Vec<Segment>,
    patch_rows: Vec<usize>,
    patch_inputs: Array2<T>,
    cond_tokens: Vec<usize>,
    cond_enc: Array2<T>,
    layers: Vec<LayerTrace<T>>,
    head_inputs: Vec<Array2<T>>,
    head_pre: Vec<Array2<T>>,
    head_final_in: Array2<T>,
    /// Head output before clamping, `rows × 2K`.
    pub raw: Array2<T>,
    k: usize,
}

impl<T: Scalar> Trace<T> {
    pub fn means(&self) -> ArrayView2<'_, T> {
        self.raw.slice(s![.., ..self.k])
    }

    pub fn log_vars(&self, clamp: (f64, f64)) -> Array2<T> {
        let (lo, hi) = (T::lit(clamp.0), T::lit(clamp.1));
        self.raw.slice(s![.., self.k..]).mapv(|v| v.max(lo).min(hi))
    }
}

impl<T: Scalar> ModelState<T> {
    pub(crate) fn check_input(&self, patches: ArrayView2<'_, T>, c: &Condition) -> Result<()> {
        let cfg = &self.config;
        c.validate(cfg.vocab_size, cfg.cond_max_len)?;
        let m = cfg.shape.num_patches();
        if patches.ncols() != cfg.shape.patch_len() || patches.nrows() >= m {
            return Err(Error::Shape(format!(
                "got {}x{} patch input, model expects fewer than {m} rows of length {}",
                patches.nrows(),
                patches.ncols(),
                cfg.shape.patch_len()
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_traced(&self, batch: &[SeqInput<'_, T>]) -> Result<Trace<T>> {
        let cfg = &self.config;
        let w = &self.weights;
        let d = cfg.d_model;
        let k = cfg.shape.patch_len();
        for (p, c) in batch {
            self.check_input(*p, c)?;
        }

        let total: usize = batch.iter().map(|(p, _)| p.nrows() + 1).sum();
        let mut rows = Vec::with_capacity(batch.len());
        let mut patch_rows = Vec::new();
        let mut offset = 0;
        for (p, _) in batch {
            let n = p.nrows() + 1;
            rows.push(offset..offset + n);
            patch_rows.extend(offset + 1..offset + n);
            offset += n;
        }
        let views: Vec<_> = batch.iter().map(|(p, _)| *p).collect();
        let patch_inputs = if views.is_empty() {
            Array2::zeros((0, k))
        } else {
            concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?
        };
        let embedded = linear(patch_inputs.view(), &w.patch_embed);

        let mut x = Array2::zeros((total, d));
        for r in &rows {
            for (pos, row) in r.clone().enumerate() {
                x.row_mut(row).assign(&self.positional.row(pos));
            }
            x.row_mut(r.start).scaled_add(T::one(), &w.start_token);
        }
        for (i, &row) in patch_rows.iter().enumerate() {
            x.row_mut(row).scaled_add(T::one(), &embedded.row(i));
        }

        let mut cond_tokens = Vec::new();
        let mut cross_segments = Vec::with_capacity(batch.len());
        let mut self_segments = Vec::with_capacity(batch.len());
        for ((_, c), r) in batch.iter().zip(&rows) {
            let start = cond_tokens.len();
            cond_tokens.extend(c.tokens.iter().map(|&t| t as usize));
            cross_segments.push(Segment {
                q: r.clone(),
                k: start..cond_tokens.len(),
            });
            self_segments.push(Segment {
                q: r.clone(),
                k: r.clone(),
            });
        }
        let cond_enc = self.encode_tokens(&cond_tokens, &cross_segments);
        let causal = self.mask == AttentionMask::Causal;

        let mut layers = Vec::with_capacity(w.layers.len());
        for layer in &w.layers {
            let (a1, self_norm) = layer_norm(x.view(), &layer.self_norm);
            let q = linear(a1.view(), &layer.self_attn.query);
            let kk = linear(a1.view(), &layer.self_attn.key);
            let v = linear(a1.view(), &layer.self_attn.value);
            let (ctx, self_probs) =
                attention(q.view(), kk.view(), v.view(), &self_segments, cfg.n_heads, causal);
            x += &linear(ctx.view(), &layer.self_attn.output);

            let (a2, cross_norm) = layer_norm(x.view(), &layer.cross_norm);
            let q2 = linear(a2.view(), &layer.cross_attn.query);
            let k2 = linear(cond_enc.view(), &layer.cross_attn.key);
            let v2 = linear(cond_enc.view(), &layer.cross_attn.value);
            let (ctx2, cross_probs) =
                attention(q2.view(), k2.view(), v2.view(), &cross_segments, cfg.n_heads, false);
            x += &linear(ctx2.view(), &layer.cross_attn.output);

            let (a3, ffn_norm) = layer_norm(x.view(), &layer.ffn_norm);
            let f_pre = linear(a3.view(), &layer.ffn_in);
            let f_act = gelu(&f_pre);
            x += &linear(f_act.view(), &layer.ffn_out);

            layers.push(LayerTrace {
                self_norm,
                a1,
                q,
                k: kk,
                v,
                self_probs,
                ctx,
                cross_norm,
                a2,
                q2,
                k2,
                v2,
                cross_probs,
                ctx2,
                ffn_norm,
                a3,
                f_pre,
                f_act,
            });
        }

        let mut head_inputs = Vec::with_capacity(w.head.hidden.len());
        let mut head_pre = Vec::with_capacity(w.head.hidden.len());
        let mut g = x;
        for lin in &w.head.hidden {
            let pre = linear(g.view(), lin);
            let act = gelu(&pre);
            head_inputs.push(g);
            head_pre.push(pre);
            g = act;
        }
        let raw = linear(g.view(), &w.head.out);

        Ok(Trace {
            rows,
            self_segments,
            cross_segments,
            patch_rows,
            patch_inputs,
            cond_tokens,
            cond_enc,
            layers,
            head_inputs,
            head_pre,
            head_final_in: g,
            raw,
            k,
        })
    }

    /// Condition encodings for stacked token ids, positions restarting at
    /// each segment's key range.
    fn encode_tokens(&self, tokens: &[usize], segments: &[Segment]) -> Array2<T> {
        let d = self.config.d_model;
        let mut enc = Array2::zeros((tokens.len(), d));
        for seg in segments {
            for (pos, row) in seg.k.clone().enumerate() {
                let mut r = enc.row_mut(row);
                r.assign(&self.weights.cond_embed.row(tokens[row]));
                r += &self.positional.row(pos);
            }
        }
        enc
    }

    /// Gradient of `Σ d_mean·mean + d_log_var·log_var` over all rows.
    /// Rows where the raw log-variance was clamped receive no gradient.
    pub(crate) fn backward(
        &self,
        trace: &Trace<T>,
        d_mean: ArrayView2<'_, T>,
        d_log_var: ArrayView2<'_, T>,
    ) -> Weights<T> {
        let cfg = &self.config;
        let w = &self.weights;
        let k = trace.k;
        let mut grad = w.zeros_like();

        let (lo, hi) = (T::lit(cfg.log_var_clamp.0), T::lit(cfg.log_var_clamp.1));
        let mut d_raw = Array2::zeros(trace.raw.raw_dim());
        d_raw.slice_mut(s![.., ..k]).assign(&d_mean);
        Zip::from(d_raw.slice_mut(s![.., k..]))
            .and(&d_log_var)
            .and(trace.raw.slice(s![.., k..]))
            .for_each(|g, &dv, &raw| {
                *g = if raw >= lo && raw <= hi { dv } else { T::zero() };
            });

        let mut dh = linear_backward(
            trace.head_final_in.view(),
            &w.head.out,
            d_raw.view(),
            &mut grad.head.out,
        );
        for i in (0..w.head.hidden.len()).rev() {
            let d_pre = gelu_backward(&trace.head_pre[i], dh.view());
            dh = linear_backward(
                trace.head_inputs[i].view(),
                &w.head.hidden[i],
                d_pre.view(),
                &mut grad.head.hidden[i],
            );
        }

        let mut d_cond = Array2::<T>::zeros(trace.cond_enc.raw_dim());
        for ((layer, lt), lg) in w
            .layers
            .iter()
            .zip(&trace.layers)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            let d_act = linear_backward(lt.f_act.view(), &layer.ffn_out, dh.view(), &mut lg.ffn_out);
            let d_pre = gelu_backward(&lt.f_pre, d_act.view());
            let d_a3 = linear_backward(lt.a3.view(), &layer.ffn_in, d_pre.view(), &mut lg.ffn_in);
            dh += &layer_norm_backward(&layer.ffn_norm, &lt.ffn_norm, d_a3.view(), &mut lg.ffn_norm);

            let ca = &layer.cross_attn;
            let d_ctx2 = linear_backward(lt.ctx2.view(), &ca.output, dh.view(), &mut lg.cross_attn.output);
            let (dq2, dk2, dv2) = attention_backward(
                lt.q2.view(),
                lt.k2.view(),
                lt.v2.view(),
                &lt.cross_probs,
                &trace.cross_segments,
                cfg.n_heads,
                d_ctx2.view(),
            );
            let d_a2 = linear_backward(lt.a2.view(), &ca.query, dq2.view(), &mut lg.cross_attn.query);
            d_cond += &linear_backward(trace.cond_enc.view(), &ca.key, dk2.view(), &mut lg.cross_attn.key);
            d_cond += &linear_backward(trace.cond_enc.view(), &ca.value, dv2.view(), &mut lg.cross_attn.value);
            dh += &layer_norm_backward(&layer.cross_norm, &lt.cross_norm, d_a2.view(), &mut lg.cross_norm);

            let sa = &layer.self_attn;
            let d_ctx = linear_backward(lt.ctx.view(), &sa.output, dh.view(), &mut lg.self_attn.output);
            let (dq, dk, dv) = attention_backward(
                lt.q.view(),
                lt.k.view(),
                lt.v.view(),
                &lt.self_probs,
                &trace.self_segments,
                cfg.n_heads,
                d_ctx.view(),
            );
            let mut d_a1 = linear_backward(lt.a1.view(), &sa.query, dq.view(), &mut lg.self_attn.query);
            d_a1 += &linear_backward(lt.a1.view(), &sa.key, dk.view(), &mut lg.self_attn.key);
            d_a1 += &linear_backward(lt.a1.view(), &sa.value, dv.view(), &mut lg.self_attn.value);
            dh += &layer_norm_backward(&layer.self_norm, &lt.self_norm, d_a1.view(), &mut lg.self_norm);
        }

        for r in &trace.rows {
            grad.start_token += &dh.row(r.start);
        }
        let d_embedded = dh.select(Axis(0), &trace.patch_rows);
        linear_backward_params(trace.patch_inputs.view(), d_embedded.view(), &mut grad.patch_embed);
        for (row, &tok) in trace.cond_tokens.iter().enumerate() {
            let mut g = grad.cond_embed.row_mut(tok);
            g += &d_cond.row(row);
        }
        grad
    }

    /// Hidden states (pre-head) are not kept in the trace; this recomputes
    /// the head on one vector.
    pub(crate) fn head_forward(&self, hidden: ArrayView2<'_, T>) -> Array2<T> {
        let mut g = hidden.to_owned();
        for lin in &self.weights.head.hidden {
            g = gelu(&linear(g.view(), lin));
        }
        linear(g.view(), &self.weights.head.out)
    }

    pub(crate) fn split_head(&self, raw: Array1<T>) -> super::GaussianParams<T> {
        let k = self.config.shape.patch_len();
        let (lo, hi) = (T::lit(self.config.log_var_clamp.0), T::lit(self.config.log_var_clamp.1));
        super::GaussianParams {
            mean: raw.slice(s![..k]).to_owned(),
            log_var: raw.slice(s![k..]).mapv(|v| v.max(lo).min(hi)),
        }
    }
}
