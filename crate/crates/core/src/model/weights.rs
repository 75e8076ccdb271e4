//! Learnable parameter containers. The same types hold gradients and Adam
//! moments, so every container can be walked as a flat list of slices in a
//! fixed order.

use ndarray::{Array, Array1, Array2, Dimension};

use super::config::ModelConfig;
use crate::rng::NoiseRng;
use crate::Scalar;

/// A read-only view of one named parameter tensor.
#[derive(Debug)]
pub struct NamedTensor<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

fn push<'a, T, D: Dimension>(out: &mut Vec<NamedTensor<'a, T>>, name: String, a: &'a Array<T, D>) {
    out.push(NamedTensor {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("parameters are contiguous"),
    });
}

fn push_mut<'a, T, D: Dimension>(out: &mut Vec<&'a mut [T]>, a: &'a mut Array<T, D>) {
    out.push(a.as_slice_mut().expect("parameters are contiguous"));
}

/// `y = x·weight + bias`, with `weight` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    fn init(fan_in: usize, fan_out: usize, rng: &mut NoiseRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || rng.symmetric(bound)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        push(out, format!("{prefix}.weight"), &self.weight);
        push(out, format!("{prefix}.bias"), &self.bias);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        push_mut(out, &mut self.weight);
        push_mut(out, &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Array1<T>,
    pub offset: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn init(d: usize) -> Self {
        Self {
            gain: Array1::ones(d),
            offset: Array1::zeros(d),
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        push(out, format!("{prefix}.gain"), &self.gain);
        push(out, format!("{prefix}.offset"), &self.offset);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        push_mut(out, &mut self.gain);
        push_mut(out, &mut self.offset);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Scalar> Attention<T> {
    fn init(d: usize, rng: &mut NoiseRng) -> Self {
        Self {
            query: Linear::init(d, d, rng),
            key: Linear::init(d, d, rng),
            value: Linear::init(d, d, rng),
            output: Linear::init(d, d, rng),
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        self.query.collect(&format!("{prefix}.query"), out);
        self.key.collect(&format!("{prefix}.key"), out);
        self.value.collect(&format!("{prefix}.value"), out);
        self.output.collect(&format!("{prefix}.output"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        self.query.collect_mut(out);
        self.key.collect_mut(out);
        self.value.collect_mut(out);
        self.output.collect_mut(out);
    }
}

/// Pre-norm decoder block: masked self-attention, cross-attention to the
/// condition, then a GELU feed-forward, each wrapped in a residual.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_norm: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub cross_norm: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub ffn_norm: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    fn init(cfg: &ModelConfig, rng: &mut NoiseRng) -> Self {
        let d = cfg.d_model;
        Self {
            self_norm: LayerNorm::init(d),
            self_attn: Attention::init(d, rng),
            cross_norm: LayerNorm::init(d),
            cross_attn: Attention::init(d, rng),
            ffn_norm: LayerNorm::init(d),
            ffn_in: Linear::init(d, cfg.ffn_dim(), rng),
            ffn_out: Linear::init(cfg.ffn_dim(), d, rng),
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        self.self_norm.collect(&format!("{prefix}.self_norm"), out);
        self.self_attn.collect(&format!("{prefix}.self_attn"), out);
        self.cross_norm.collect(&format!("{prefix}.cross_norm"), out);
        self.cross_attn.collect(&format!("{prefix}.cross_attn"), out);
        self.ffn_norm.collect(&format!("{prefix}.ffn_norm"), out);
        self.ffn_in.collect(&format!("{prefix}.ffn_in"), out);
        self.ffn_out.collect(&format!("{prefix}.ffn_out"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        self.self_norm.collect_mut(out);
        self.self_attn.collect_mut(out);
        self.cross_norm.collect_mut(out);
        self.cross_attn.collect_mut(out);
        self.ffn_norm.collect_mut(out);
        self.ffn_in.collect_mut(out);
        self.ffn_out.collect_mut(out);
    }
}

/// Prediction head: `n_head_layers` of (linear, GELU), then a final linear
/// onto `2K` outputs (means, then raw log-variances).
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub hidden: Vec<Linear<T>>,
    pub out: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub patch_embed: Linear<T>,
    pub start_token: Array1<T>,
    pub cond_embed: Array2<T>,
    pub layers: Vec<DecoderLayer<T>>,
    pub head: Head<T>,
}

impl<T: Scalar> Weights<T> {
    /// Fan-in uniform initialization. The head's final weight is shrunk by
    /// 0.01 and its bias zeroed so a fresh model predicts roughly N(0, I).
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = NoiseRng::new(cfg.seed);
        let d = cfg.d_model;
        let k = cfg.shape.patch_len();
        let embed_bound = 1.0 / (d as f64).sqrt();
        let patch_embed = Linear::init(k, d, &mut rng);
        let start_token = Array1::from_shape_simple_fn(d, || rng.symmetric(embed_bound));
        let cond_embed =
            Array2::from_shape_simple_fn((cfg.vocab_size, d), || rng.symmetric(embed_bound));
        let layers = (0..cfg.n_decoder_layers)
            .map(|_| DecoderLayer::init(cfg, &mut rng))
            .collect();
        let hidden = (0..cfg.n_head_layers)
            .map(|_| Linear::init(d, d, &mut rng))
            .collect();
        let mut out = Linear::init(d, 2 * k, &mut rng);
        out.weight.mapv_inplace(|w| w * T::lit(0.01));
        Self {
            patch_embed,
            start_token,
            cond_embed,
            layers,
            head: Head { hidden, out },
        }
    }

    /// All tensors with their names and shapes, in checkpoint order.
    pub fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let mut out = Vec::new();
        self.patch_embed.collect("patch_embed", &mut out);
        push(&mut out, "start_token".into(), &self.start_token);
        push(&mut out, "cond_embed".into(), &self.cond_embed);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(&format!("layers.{i}"), &mut out);
        }
        for (i, lin) in self.head.hidden.iter().enumerate() {
            lin.collect(&format!("head.hidden.{i}"), &mut out);
        }
        self.head.out.collect("head.out", &mut out);
        out
    }

    /// Mutable slices in the same order as [`Weights::tensors`].
    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        self.patch_embed.collect_mut(&mut out);
        push_mut(&mut out, &mut self.start_token);
        push_mut(&mut out, &mut self.cond_embed);
        for layer in &mut self.layers {
            layer.collect_mut(&mut out);
        }
        for lin in &mut self.head.hidden {
            lin.collect_mut(&mut out);
        }
        self.head.out.collect_mut(&mut out);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(T::zero());
        }
        z
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Flat copy of every parameter in order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    /// `self += alpha · other`, elementwise.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        let src = other.tensors();
        for (dst, s) in self.slices_mut().into_iter().zip(src) {
            for (d, &v) in dst.iter_mut().zip(s.data) {
                *d += alpha * v;
            }
        }
    }

    /// Mutable access to the parameter at flat position `index`.
    pub fn get_mut(&mut self, mut index: usize) -> Option<&mut T> {
        for s in self.slices_mut() {
            if index < s.len() {
                return Some(&mut s[index]);
            }
            index -= s.len();
        }
        None
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn sq_norm(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(T::zero(), |acc, &v| acc + v * v)
    }
}
