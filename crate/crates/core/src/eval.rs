//! Held-out likelihood, calibration, the causality audit, whole-model
//! gradient checking and cost reporting.
//!
//! FLOPs are `2 ×` multiply-accumulates of one teacher-forced forward pass
//! with `L = M` decoder rows (start token plus `M − 1` patches) and the
//! condition at its maximum length `Lc`:
//!
//! ```text
//! embed            (L − 1)·K·d
//! self-attention   3·L·d² + 2·L²·d + L·d²          per layer
//! cross-attention  L·d² + 2·Lc·d² + 2·L·Lc·d + L·d² per layer
//! feed-forward     2·L·d·(ffn_mult·d)              per layer
//! head             L·(n_head_layers·d² + 2K·d)
//! ```
//!
//! Norms, softmax, GELU and the causal mask's skipped scores are ignored.

use std::fmt;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::data::{oracle_nll, Dataset};
use crate::error::{Error, Result};
use crate::gaussian::{half_ln_2pi, SampleMode};
use crate::model::{Condition, ModelConfig, ModelState, Weights};
use crate::patch::{patchify, NoiseTensor, PatchSequence};
use crate::rng::NoiseRng;
use crate::sample::{sample_noise, sequence_logprob};
use crate::train::{compute_loss_with_noise, Example};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model_nll: f64,
    pub oracle_nll: f64,
    pub baseline_nll: f64,
    pub pit_ks_statistic: f64,
    pub causality_max_deviation: f64,
    pub flops_estimate: u64,
    /// Seconds per full-tensor sample.
    pub sample_latency: f64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model_nll = {}", self.model_nll)?;
        writeln!(f, "oracle_nll = {}", self.oracle_nll)?;
        writeln!(f, "baseline_nll = {}", self.baseline_nll)?;
        writeln!(f, "pit_ks_statistic = {}", self.pit_ks_statistic)?;
        writeln!(f, "causality_max_deviation = {}", self.causality_max_deviation)?;
        writeln!(f, "flops_estimate = {}", self.flops_estimate)?;
        writeln!(f, "sample_latency = {}", self.sample_latency)
    }
}

fn check_dataset<T: Scalar>(state: &ModelState<T>, d: &Dataset<T>) -> Result<()> {
    d.check_shape(&state.config.shape)?;
    if d.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    Ok(())
}

/// Mean per-element `−log P(x | c)` over records.
pub fn eval_nll<T: Scalar>(state: &ModelState<T>, d: &Dataset<T>) -> Result<f64> {
    check_dataset(state, d)?;
    let lps = d
        .records
        .par_iter()
        .map(|r| sequence_logprob(state, &r.tensor, &r.condition).map(|(lp, _)| lp.as_f64()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(-lps.iter().sum::<f64>() / (lps.len() * d.numel()) as f64)
}

/// Mean per-element oracle NLL over records.
pub fn oracle_dataset_nll<T: Scalar>(d: &Dataset<T>, patch_size: usize) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let v = d
        .records
        .par_iter()
        .map(|r| oracle_nll(&r.tensor, &r.condition, patch_size))
        .collect::<Result<Vec<f64>>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean per-element NLL under `N(0, I)`; zero for an empty dataset.
pub fn baseline_nll<T: Scalar>(d: &Dataset<T>) -> f64 {
    let n = d.len() * d.numel();
    if n == 0 {
        return 0.0;
    }
    let sq: f64 = d
        .records
        .iter()
        .flat_map(|r| r.tensor.values.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    half_ln_2pi::<f64>() + 0.5 * sq / n as f64
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `Φ((x − μ)/σ)` for every element under teacher-forced parameters, in
/// record order.
pub fn pit_values<T: Scalar>(state: &ModelState<T>, d: &Dataset<T>) -> Result<Vec<f64>> {
    check_dataset(state, d)?;
    let p = state.config.shape.patch_size;
    let per_record = d
        .records
        .par_iter()
        .map(|r| {
            let seq = patchify(&r.tensor, p)?;
            let params = state.forward_teacher_forced(&seq, &r.condition)?;
            let mut out = Vec::with_capacity(seq.patches.len());
            for (prm, row) in params.iter().zip(seq.patches.rows()) {
                for ((&x, &mu), &lv) in row.iter().zip(&prm.mean).zip(&prm.log_var) {
                    let z = (x - mu).as_f64() * (-0.5 * lv.as_f64()).exp();
                    out.push(std_normal_cdf(z));
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_record.concat())
}

/// Kolmogorov–Smirnov distance between the empirical law of `u` and
/// `U(0, 1)`.
pub fn ks_uniform(u: &[f64]) -> f64 {
    if u.is_empty() {
        return 0.0;
    }
    let mut s = u.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - v).max(v - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Counts over equal-width bins of `[0, 1]`.
    pub histogram: Vec<usize>,
    pub ks_statistic: f64,
    pub n: usize,
}

pub fn calibration_pit<T: Scalar>(state: &ModelState<T>, d: &Dataset<T>, bins: usize) -> Result<Calibration> {
    if bins == 0 {
        return Err(Error::Input("histogram needs at least one bin".into()));
    }
    let u = pit_values(state, d)?;
    let mut histogram = vec![0; bins];
    for &v in &u {
        histogram[((v * bins as f64) as usize).min(bins - 1)] += 1;
    }
    Ok(Calibration {
        histogram,
        ks_statistic: ks_uniform(&u),
        n: u.len(),
    })
}

fn random_condition(cfg: &ModelConfig, rng: &mut NoiseRng) -> Condition {
    let len = 1 + rng.below(cfg.cond_max_len);
    Condition::new((0..len).map(|_| rng.below(cfg.vocab_size) as u32).collect())
}

/// Largest change in any predicted mean or log-variance of patches `≤ j`
/// when patches `j..M` are replaced, over `trials` random inputs and `j`.
pub fn audit_causality<T: Scalar>(state: &ModelState<T>, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Input("causality audit needs at least one trial".into()));
    }
    let cfg = &state.config;
    let (m, k) = (cfg.shape.num_patches(), cfg.shape.patch_len());
    let devs = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = NoiseRng::new(seed).split(t as u64);
            let c = random_condition(cfg, &mut rng);
            let base = Array2::from_shape_simple_fn((m, k), || rng.normal::<T>());
            let j = rng.below(m);
            let mut moved = base.clone();
            for v in moved.slice_mut(ndarray::s![j.., ..]).iter_mut() {
                *v += T::lit(3.0) * rng.normal::<T>();
            }
            let run = |p: Array2<T>| {
                let s = PatchSequence::new(cfg.shape, p)?;
                state.forward_teacher_forced(&s, &c)
            };
            let (a, b) = (run(base)?, run(moved)?);
            let mut dev = 0.0f64;
            for (pa, pb) in a.iter().zip(&b).take(j + 1) {
                for (x, y) in pa.mean.iter().chain(&pa.log_var).zip(pb.mean.iter().chain(&pb.log_var)) {
                    dev = dev.max((*x - *y).abs().as_f64());
                }
            }
            Ok(dev)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(devs.into_iter().fold(0.0, f64::max))
}

/// Closed-form forward-pass FLOPs; see the module docs for the tally.
pub fn estimate_flops(cfg: &ModelConfig) -> u64 {
    let l = cfg.shape.num_patches() as u64;
    let lc = cfg.cond_max_len as u64;
    let k = cfg.shape.patch_len() as u64;
    let d = cfg.d_model as u64;
    let embed = (l - 1) * k * d;
    let self_attn = 4 * l * d * d + 2 * l * l * d;
    let cross_attn = 2 * l * d * d + 2 * lc * d * d + 2 * l * lc * d;
    let ffn = 2 * l * d * cfg.ffn_dim() as u64;
    let head = l * (cfg.n_head_layers as u64 * d * d + 2 * k * d);
    2 * (embed + cfg.n_decoder_layers as u64 * (self_attn + cross_attn + ffn) + head)
}

/// Mean wall-clock seconds for one stochastic full-tensor sample.
pub fn sample_latency<T: Scalar>(state: &ModelState<T>, c: &Condition, reps: usize) -> Result<f64> {
    let reps = reps.max(1);
    let start = Instant::now();
    for r in 0..reps {
        sample_noise(state, c, r as u64, SampleMode::Stochastic, 1.0)?;
    }
    Ok(start.elapsed().as_secs_f64() / reps as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst weight.
    pub worst_index: usize,
    pub checked: usize,
}

/// Denominator floor for relative errors. Central differences of a loss of
/// order one carry about `1e-12` of rounding noise at step `1e-4`, so
/// gradients below this floor are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of the total loss
/// (NLL plus `recon_weight` × reconstruction at fixed `noise`) over every
/// weight.
pub fn grad_check_against(
    state: &ModelState<f64>,
    batch: &[Example<'_, f64>],
    noise: &Array2<f64>,
    recon_weight: f64,
    step: f64,
    analytic: &Weights<f64>,
) -> Result<GradCheck> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Input(format!("finite-difference step must be positive, got {step}")));
    }
    let flat = analytic.flatten();
    let n = state.weights.num_params();
    if flat.len() != n {
        return Err(Error::Shape("analytic gradient does not match the weights".into()));
    }
    let loss_at = |i: usize, delta: f64| -> Result<f64> {
        let mut s = state.clone();
        *s.weights.get_mut(i).expect("index in range") += delta;
        Ok(compute_loss_with_noise(&s, batch, noise.view(), recon_weight)?.0.total)
    };
    let errs = (0..n)
        .into_par_iter()
        .map(|i| {
            let numeric = (loss_at(i, step)? - loss_at(i, -step)?) / (2.0 * step);
            Ok(relative_error(flat[i], numeric))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (worst_index, max_rel_error) = errs
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        checked: n,
    })
}

/// Whole-model gradient check in double precision.
pub fn grad_check(
    state: &ModelState<f64>,
    batch: &[Example<'_, f64>],
    noise: &Array2<f64>,
    recon_weight: f64,
    step: f64,
) -> Result<GradCheck> {
    let (_, grads) = compute_loss_with_noise(state, batch, noise.view(), recon_weight)?;
    grad_check_against(state, batch, noise, recon_weight, step, &grads)
}

/// All report fields. The causality audit and latency probe use `seed` and
/// the first record's condition.
pub fn evaluate<T: Scalar>(state: &ModelState<T>, d: &Dataset<T>, audit_trials: usize, seed: u64) -> Result<EvalReport> {
    check_dataset(state, d)?;
    let cal = calibration_pit(state, d, 10)?;
    Ok(EvalReport {
        model_nll: eval_nll(state, d)?,
        oracle_nll: oracle_dataset_nll(d, state.config.shape.patch_size)?,
        baseline_nll: baseline_nll(d),
        pit_ks_statistic: cal.ks_statistic,
        causality_max_deviation: audit_causality(state, audit_trials, seed)?,
        flops_estimate: estimate_flops(&state.config),
        sample_latency: sample_latency(state, &d.records[0].condition, 3)?,
    })
}

/// Draws one tensor per condition from the model itself, for
/// self-consistency checks.
pub fn self_sampled_dataset<T: Scalar>(
    state: &ModelState<T>,
    conditions: &[Condition],
    seed: u64,
) -> Result<Dataset<T>> {
    let sh = state.config.shape;
    let tensors = conditions
        .par_iter()
        .enumerate()
        .map(|(i, c)| sample_noise(state, c, seed ^ i as u64, SampleMode::Stochastic, 1.0).map(|r| r.tensor))
        .collect::<Result<Vec<NoiseTensor<T>>>>()?;
    let mut d = Dataset::new(sh.channels, sh.height, sh.width, state.config.cond_max_len, state.config.vocab_size);
    for (c, t) in conditions.iter().zip(tensors) {
        d.push(c.clone(), t)?;
    }
    Ok(d)
}
