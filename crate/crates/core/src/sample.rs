//! Autoregressive generation and exact scoring under the learned prior.

use ndarray::{s, Array1, Array2};

use crate::error::{Error, Result};
use crate::gaussian::{patch_logprob, sample_patch, SampleMode};
use crate::model::{Condition, KvCache, ModelState};
use crate::patch::{depatchify, patchify, NoiseTensor, PatchSequence};
use crate::rng::NoiseRng;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult<T> {
    pub tensor: NoiseTensor<T>,
    pub per_patch_logprob: Vec<T>,
    pub total_logprob: T,
    pub seed: u64,
    pub mode: SampleMode,
    pub temperature: f64,
}

/// Draws `ẑ_T` patch by patch, feeding each sampled patch back in.
pub fn sample_noise<T: Scalar>(
    state: &ModelState<T>,
    c: &Condition,
    seed: u64,
    mode: SampleMode,
    temperature: f64,
) -> Result<SampleResult<T>> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::Input(format!("temperature must be non-negative, got {temperature}")));
    }
    c.validate(state.config.vocab_size, state.config.cond_max_len)?;
    let shape = state.config.shape;
    let (m, k) = (shape.num_patches(), shape.patch_len());
    let mut rng = NoiseRng::new(seed);
    let mut cache = KvCache::new();
    let mut patches = Array2::zeros((m, k));
    let mut per_patch = Vec::with_capacity(m);
    for j in 0..m {
        let params = state.forward_incremental(patches.slice(s![..j, ..]), c, Some(&mut cache))?;
        let patch: Array1<T> = sample_patch(&params, &mut rng, mode, temperature)?;
        per_patch.push(patch_logprob(patch.view(), &params)?);
        patches.row_mut(j).assign(&patch);
    }
    let tensor = depatchify(&PatchSequence { shape, patches })?;
    let total = per_patch.iter().fold(T::zero(), |a, &b| a + b);
    Ok(SampleResult {
        tensor,
        per_patch_logprob: per_patch,
        total_logprob: total,
        seed,
        mode,
        temperature,
    })
}

/// `log P(t | c)` and its per-patch terms via one teacher-forced pass.
pub fn sequence_logprob<T: Scalar>(
    state: &ModelState<T>,
    t: &NoiseTensor<T>,
    c: &Condition,
) -> Result<(T, Vec<T>)> {
    if !t.matches(&state.config.shape) {
        return Err(Error::Shape(format!(
            "tensor {:?} does not match model shape {:?}",
            t.dims(),
            state.config.shape
        )));
    }
    let seq = patchify(t, state.config.shape.patch_size)?;
    let params = state.forward_teacher_forced(&seq, c)?;
    let per_patch = params
        .iter()
        .zip(seq.patches.rows())
        .map(|(p, row)| patch_logprob(row, p))
        .collect::<Result<Vec<T>>>()?;
    let total = per_patch.iter().fold(T::zero(), |a, &b| a + b);
    Ok((total, per_patch))
}
