//! Preference optimization over the learned prior.
//!
//! Sampling a tensor is an `M`-step episode whose actions are whole
//! patches; the policy log-probability of an action is the sum of its
//! element log-densities. Rollouts are scored by a pluggable reward, the
//! best and worst rollouts per condition become a preference pair when their
//! score gap exceeds a threshold, and the prior is fine-tuned either on the
//! preferred samples' NLL or with the DPO objective against a frozen copy.
//!
//! `NARP` pair files share the `NARD` header (`u32` C, H, W,
//! `cond_max_len`, `vocab_size` after the `u64` count); each record is a
//! `u32` token count, the `u32` tokens, `f32` preferred and rejected scores,
//! then both tensors as `C·H·W` `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{oracle_nll, OracleSpec};
use crate::error::{truncated, Error, Result};
use crate::gaussian::SampleMode;
use crate::model::forward::Trace;
use crate::model::{Condition, ModelState, Weights};
use crate::patch::{patch_index_map, patchify, NoiseTensor, PatchSequence, TensorShape};
use crate::rng::NoiseRng;
use crate::sample::sample_noise;
use crate::train::{clip_grads, lr_schedule, steps_per_epoch, Adam, TrainConfig};
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"NARP";
pub const VERSION: u32 = 1;
const KIND: &str = "NARP";

/// Terminal reward of an episode.
pub trait Reward<T>: Sync {
    fn score(&self, t: &NoiseTensor<T>, c: &Condition) -> f64;
}

impl<T, F> Reward<T> for F
where
    F: Fn(&NoiseTensor<T>, &Condition) -> f64 + Sync,
{
    fn score(&self, t: &NoiseTensor<T>, c: &Condition) -> f64 {
        self(t, c)
    }
}

/// Continuous score plus two 0/1 bonuses, scored against the oracle law:
/// `−oracle_nll + [oracle_nll < 1.5] + [|mean(x) − mean(μ)| ≤ 0.1]`, where
/// `μ` are the oracle's conditional patch means given the realized prefix.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticReward {
    pub patch_size: usize,
}

impl<T: Scalar> Reward<T> for SyntheticReward {
    fn score(&self, t: &NoiseTensor<T>, c: &Condition) -> f64 {
        reward_synthetic(t, c, self.patch_size).unwrap_or(f64::NEG_INFINITY)
    }
}

pub fn reward_synthetic<T: Scalar>(t: &NoiseTensor<T>, c: &Condition, patch_size: usize) -> Result<f64> {
    let nll = oracle_nll(t, c, patch_size)?;
    let shape = TensorShape::new(t.channels, t.height, t.width, patch_size)?;
    let map = patch_index_map(&shape)?;
    let spec = OracleSpec::for_condition(c);
    let k = shape.patch_len();
    let (mut prev, mut mu_sum, mut x_sum) = (0.0, 0.0, 0.0);
    for j in 0..shape.num_patches() {
        let patch_sum: f64 = (0..k).map(|e| t.values[map[j * k + e]].as_f64()).sum();
        mu_sum += spec.patch_mean(prev) * k as f64;
        x_sum += patch_sum;
        prev = patch_sum / k as f64;
    }
    let n = shape.numel() as f64;
    let likely = if nll < 1.5 { 1.0 } else { 0.0 };
    let centered = if ((x_sum - mu_sum) / n).abs() <= 0.1 { 1.0 } else { 0.0 };
    Ok(-nll + likely + centered)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub condition: Condition,
    pub seed: u64,
    /// Sampled patches in episode order, `M × K`.
    pub actions: Array2<T>,
    pub step_logprobs: Vec<T>,
    pub reward: f64,
    pub tensor: NoiseTensor<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn total_logprob(&self) -> T {
        self.step_logprobs.iter().fold(T::zero(), |a, &b| a + b)
    }
}

pub fn rollout<T: Scalar>(
    state: &ModelState<T>,
    c: &Condition,
    seed: u64,
    reward: &impl Reward<T>,
) -> Result<Trajectory<T>> {
    let r = sample_noise(state, c, seed, SampleMode::Stochastic, 1.0)?;
    let actions = patchify(&r.tensor, state.config.shape.patch_size)?.patches;
    let score = reward.score(&r.tensor, c);
    Ok(Trajectory {
        condition: c.clone(),
        seed,
        actions,
        step_logprobs: r.per_patch_logprob,
        reward: score,
        tensor: r.tensor,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair<T> {
    pub condition: Condition,
    pub preferred: NoiseTensor<T>,
    pub preferred_score: f64,
    pub rejected: NoiseTensor<T>,
    pub rejected_score: f64,
}

impl<T> PreferencePair<T> {
    pub fn gap(&self) -> f64 {
        self.preferred_score - self.rejected_score
    }
}

/// Indices of the best and worst scores (lowest index wins ties), if their
/// difference exceeds `gap`.
pub fn select_pair(scores: &[f64], gap: f64) -> Option<(usize, usize)> {
    let mut best = 0;
    let mut worst = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
        if s < scores[worst] {
            worst = i;
        }
    }
    (!scores.is_empty() && scores[best] - scores[worst] > gap).then_some((best, worst))
}

/// Seed of rollout `r` for condition `i`.
pub fn rollout_seed(seed: u64, i: usize, r: usize, n_rollouts: usize) -> u64 {
    seed ^ (i * n_rollouts + r) as u64
}

/// Runs `n_rollouts` episodes per condition and keeps the (best, worst)
/// pair whenever the score gap exceeds `gap`. Rollouts run in parallel;
/// the result depends only on `seed`.
pub fn build_pairs<T: Scalar>(
    state: &ModelState<T>,
    conditions: &[Condition],
    n_rollouts: usize,
    reward: &impl Reward<T>,
    gap: f64,
    seed: u64,
) -> Result<Vec<PreferencePair<T>>> {
    if n_rollouts < 2 {
        return Err(Error::Input(format!("need at least 2 rollouts, got {n_rollouts}")));
    }
    if !(gap >= 0.0) {
        return Err(Error::Input(format!("gap must be non-negative, got {gap}")));
    }
    let jobs: Vec<(usize, usize)> = (0..conditions.len())
        .flat_map(|i| (0..n_rollouts).map(move |r| (i, r)))
        .collect();
    let trajectories = jobs
        .par_iter()
        .map(|&(i, r)| rollout(state, &conditions[i], rollout_seed(seed, i, r, n_rollouts), reward))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for (c, group) in conditions.iter().zip(trajectories.chunks(n_rollouts)) {
        let scores: Vec<f64> = group.iter().map(|t| t.reward).collect();
        if let Some((best, worst)) = select_pair(&scores, gap) {
            pairs.push(PreferencePair {
                condition: c.clone(),
                preferred: group[best].tensor.clone(),
                preferred_score: scores[best],
                rejected: group[worst].tensor.clone(),
                rejected_score: scores[worst],
            });
        }
    }
    Ok(pairs)
}

/// Traced teacher-forced pass over whole tensors.
struct Scored<T> {
    trace: Trace<T>,
    targets: Array2<T>,
    /// Per-sequence log-probabilities, divided by the element count.
    logprobs: Vec<T>,
}

fn score_batch<T: Scalar>(state: &ModelState<T>, items: &[(&NoiseTensor<T>, &Condition)]) -> Result<Scored<T>> {
    let shape = state.config.shape;
    let mut seqs: Vec<PatchSequence<T>> = Vec::with_capacity(items.len());
    for (t, _) in items {
        if !t.matches(&shape) {
            return Err(Error::Shape(format!(
                "tensor {:?} does not match model shape {:?}",
                t.dims(),
                shape
            )));
        }
        seqs.push(patchify(t, shape.patch_size)?);
    }
    let inputs: Vec<_> = seqs
        .iter()
        .zip(items)
        .map(|(s, (_, c))| (s.patches.slice(s![..s.len() - 1, ..]), *c))
        .collect();
    let trace = state.forward_traced(&inputs)?;
    let views: Vec<_> = seqs.iter().map(|s| s.patches.view()).collect();
    let targets = ndarray::concatenate(ndarray::Axis(0), &views).expect("patch widths agree");
    let means = trace.means();
    let log_vars = trace.log_vars(state.config.log_var_clamp);
    let n = T::from_usize(shape.numel()).unwrap();
    let logprobs = trace
        .rows
        .iter()
        .map(|r| {
            let mut lp = T::zero();
            for row in r.clone() {
                for e in 0..targets.ncols() {
                    lp += crate::gaussian::logpdf_element(targets[[row, e]], means[[row, e]], log_vars[[row, e]]);
                }
            }
            lp / n
        })
        .collect();
    Ok(Scored {
        trace,
        targets,
        logprobs,
    })
}

/// Gradient of `Σ_b coef_b · logprob_b` (normalized log-probabilities).
fn logprob_backward<T: Scalar>(state: &ModelState<T>, scored: &Scored<T>, coefs: &[T]) -> Weights<T> {
    let means = scored.trace.means();
    let log_vars = scored.trace.log_vars(state.config.log_var_clamp);
    let n = T::from_usize(state.config.shape.numel()).unwrap();
    let half = T::lit(0.5);
    let mut d_mean = Array2::zeros(scored.targets.raw_dim());
    let mut d_lv = Array2::zeros(scored.targets.raw_dim());
    for (r, &coef) in scored.trace.rows.iter().zip(coefs) {
        let w = coef / n;
        let rows = s![r.clone(), ..];
        Zip::from(d_mean.slice_mut(rows))
            .and(d_lv.slice_mut(rows))
            .and(scored.targets.slice(rows))
            .and(means.slice(rows))
            .and(log_vars.slice(rows))
            .for_each(|dm, dv, &x, &mu, &lv| {
                let inv_var = (-lv).exp();
                let res = x - mu;
                *dm = w * res * inv_var;
                *dv = w * half * (res * res * inv_var - T::one());
            });
    }
    state.backward(&scored.trace, d_mean.view(), d_lv.view())
}

/// Mean per-element NLL of the preferred tensors; rejected tensors are
/// ignored.
pub fn preferred_nll_loss<T: Scalar>(
    state: &ModelState<T>,
    pairs: &[&PreferencePair<T>],
) -> Result<(f64, Weights<T>)> {
    if pairs.is_empty() {
        return Err(Error::Input("no preference pairs".into()));
    }
    let items: Vec<_> = pairs.iter().map(|p| (&p.preferred, &p.condition)).collect();
    let scored = score_batch(state, &items)?;
    let b = T::from_usize(pairs.len()).unwrap();
    let loss = -scored.logprobs.iter().fold(T::zero(), |a, &l| a + l) / b;
    let coefs = vec![-T::one() / b; pairs.len()];
    Ok((loss.as_f64(), logprob_backward(state, &scored, &coefs)))
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_same_config<T>(policy: &ModelState<T>, reference: &ModelState<T>) -> Result<()> {
    if policy.config != reference.config {
        return Err(Error::Config("policy and reference configurations differ".into()));
    }
    Ok(())
}

/// DPO loss and margin statistics for a batch of pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoReport {
    pub loss: f64,
    /// Mean of `logπ(z^p) − logπ(z^r)` (per element) under the policy.
    pub margin: f64,
}

/// Mean of `−ln σ(β·[(logπ(p) − logπ_ref(p)) − (logπ(r) − logπ_ref(r))])`
/// with per-element log-probabilities. Gradients cover the policy only.
pub fn dpo_loss<T: Scalar>(
    policy: &ModelState<T>,
    reference: &ModelState<T>,
    pairs: &[&PreferencePair<T>],
    beta: f64,
) -> Result<(DpoReport, Weights<T>)> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Input(format!("beta must be positive, got {beta}")));
    }
    if pairs.is_empty() {
        return Err(Error::Input("no preference pairs".into()));
    }
    check_same_config(policy, reference)?;
    let items: Vec<_> = pairs
        .iter()
        .flat_map(|p| [(&p.preferred, &p.condition), (&p.rejected, &p.condition)])
        .collect();
    let pol = score_batch(policy, &items)?;
    let refs = score_batch(reference, &items)?.logprobs;
    let b = pairs.len() as f64;
    let mut coefs = vec![T::zero(); items.len()];
    let (mut loss, mut margin) = (0.0, 0.0);
    for i in 0..pairs.len() {
        let (pp, pr) = (pol.logprobs[2 * i].as_f64(), pol.logprobs[2 * i + 1].as_f64());
        let (rp, rr) = (refs[2 * i].as_f64(), refs[2 * i + 1].as_f64());
        let z = beta * ((pp - rp) - (pr - rr));
        loss += softplus(-z) / b;
        margin += (pp - pr) / b;
        let g = sigmoid(-z) * beta / b;
        coefs[2 * i] = T::lit(-g);
        coefs[2 * i + 1] = T::lit(g);
    }
    let grads = logprob_backward(policy, &pol, &coefs);
    Ok((DpoReport { loss, margin }, grads))
}

/// Mean per-element margin `logπ(z^p) − logπ(z^r)` over pairs.
pub fn mean_margin<T: Scalar>(state: &ModelState<T>, pairs: &[PreferencePair<T>]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let items: Vec<_> = pairs
        .iter()
        .flat_map(|p| [(&p.preferred, &p.condition), (&p.rejected, &p.condition)])
        .collect();
    let lp = score_batch(state, &items)?.logprobs;
    Ok(lp.chunks(2).map(|c| (c[0] - c[1]).as_f64()).sum::<f64>() / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    PreferredNll,
    Dpo,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "preferred-nll" => Ok(Self::PreferredNll),
            "dpo" => Ok(Self::Dpo),
            other => Err(Error::Input(format!("unknown fine-tuning mode `{other}`"))),
        }
    }
}

/// Adam over the chosen preference objective with the same schedule and
/// batching as [`crate::train::fit`]. Returns the tuned model and the mean
/// loss of each epoch; zero epochs returns the input unchanged.
pub fn finetune<T: Scalar>(
    state: &ModelState<T>,
    pairs: &[PreferencePair<T>],
    mode: FinetuneMode,
    cfg: &TrainConfig,
    beta: f64,
) -> Result<(ModelState<T>, Vec<f64>)> {
    TrainConfig {
        epochs: cfg.epochs.max(1),
        ..cfg.clone()
    }
    .validate()?;
    if cfg.epochs == 0 {
        return Ok((state.clone(), Vec::new()));
    }
    if pairs.is_empty() {
        return Err(Error::Input("no preference pairs to fine-tune on".into()));
    }
    let reference = state.clone();
    let mut policy = state.clone();
    let mut adam = Adam::new(&policy.weights, cfg);
    let mut rng = NoiseRng::new(cfg.seed);
    let per_epoch = steps_per_epoch(pairs.len(), cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreferencePair<T>> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (loss, mut grads) = match mode {
                FinetuneMode::PreferredNll => preferred_nll_loss(&policy, &batch)?,
                FinetuneMode::Dpo => {
                    let (r, g) = dpo_loss(&policy, &reference, &batch, beta)?;
                    (r.loss, g)
                }
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: format!("{mode:?} loss {loss}"),
                });
            }
            clip_grads(&mut grads, cfg.max_grad_norm);
            adam.step(&mut policy.weights, &grads, lr_schedule(step, total, cfg));
            epoch_loss += loss / per_epoch as f64;
            step += 1;
        }
        history.push(epoch_loss);
    }
    Ok((policy, history))
}

/// Pairs plus the shape header they were written with.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub cond_max_len: usize,
    pub vocab_size: usize,
    pub pairs: Vec<PreferencePair<T>>,
}

pub fn write_pairs<T: Scalar, W: Write>(set: &PairSet<T>, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u64::<LittleEndian>(set.pairs.len() as u64)?;
    for v in [set.channels, set.height, set.width, set.cond_max_len, set.vocab_size] {
        out.write_u32::<LittleEndian>(v as u32)?;
    }
    let numel = set.channels * set.height * set.width;
    for p in &set.pairs {
        if p.preferred.values.len() != numel || p.rejected.values.len() != numel {
            return Err(Error::Shape("pair tensor does not match the set's shape".into()));
        }
        out.write_u32::<LittleEndian>(p.condition.len() as u32)?;
        for &t in &p.condition.tokens {
            out.write_u32::<LittleEndian>(t)?;
        }
        out.write_f32::<LittleEndian>(p.preferred_score as f32)?;
        out.write_f32::<LittleEndian>(p.rejected_score as f32)?;
        for v in p.preferred.values.iter().chain(&p.rejected.values) {
            out.write_f32::<LittleEndian>(v.as_f64() as f32)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_pairs<T: Scalar, R: Read>(mut input: R) -> Result<PairSet<T>> {
    let corrupt = |detail: String| Error::CorruptHeader { kind: KIND, detail };
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated(KIND, "magic"))?;
    if &magic != MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let version = input.read_u32::<LittleEndian>().map_err(truncated(KIND, "version"))?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = input.read_u64::<LittleEndian>().map_err(truncated(KIND, "pair count"))?;
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = input.read_u32::<LittleEndian>().map_err(truncated(KIND, "shape header"))? as usize;
    }
    let [c, h, w, cond_max_len, vocab_size] = dims;
    if c == 0 || h == 0 || w == 0 || cond_max_len == 0 || vocab_size == 0 {
        return Err(corrupt(format!("zero dimension in header {dims:?}")));
    }
    let numel = c * h * w;
    let mut pairs = Vec::new();
    for i in 0..count {
        let what = format!("pair {i}");
        let len = input.read_u32::<LittleEndian>().map_err(truncated(KIND, &what))? as usize;
        if len == 0 || len > cond_max_len {
            return Err(corrupt(format!("pair {i} has {len} condition tokens")));
        }
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            let t = input.read_u32::<LittleEndian>().map_err(truncated(KIND, &what))?;
            if t as usize >= vocab_size {
                return Err(Error::TokenOutOfVocab { token: t, vocab_size });
            }
            tokens.push(t);
        }
        let ps = input.read_f32::<LittleEndian>().map_err(truncated(KIND, &what))? as f64;
        let rs = input.read_f32::<LittleEndian>().map_err(truncated(KIND, &what))? as f64;
        let read_tensor = |input: &mut R| -> Result<NoiseTensor<T>> {
            let mut v = Vec::with_capacity(numel);
            for _ in 0..numel {
                v.push(T::lit(input.read_f32::<LittleEndian>().map_err(truncated(KIND, &what))? as f64));
            }
            NoiseTensor::new(c, h, w, v)
        };
        let preferred = read_tensor(&mut input)?;
        let rejected = read_tensor(&mut input)?;
        pairs.push(PreferencePair {
            condition: Condition::new(tokens),
            preferred,
            preferred_score: ps,
            rejected,
            rejected_score: rs,
        });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(corrupt("trailing bytes after last pair".into()));
    }
    Ok(PairSet {
        channels: c,
        height: h,
        width: w,
        cond_max_len,
        vocab_size,
        pairs,
    })
}

pub fn save<T: Scalar>(set: &PairSet<T>, path: impl AsRef<Path>) -> Result<()> {
    write_pairs(set, BufWriter::new(File::create(path)?))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<PairSet<T>> {
    read_pairs(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::oracle_generate;
    use crate::model::ModelConfig;
    use crate::sample::sequence_logprob;

    fn state() -> ModelState<f64> {
        ModelState::init(ModelConfig {
            d_model: 16,
            n_heads: 2,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn random_pair(rng: &mut NoiseRng, token: u32) -> PreferencePair<f64> {
        let mut t = || NoiseTensor::new(1, 8, 8, (0..64).map(|_| rng.normal()).collect()).unwrap();
        PreferencePair {
            condition: Condition::single(token),
            preferred: t(),
            preferred_score: 5.0,
            rejected: t(),
            rejected_score: 1.0,
        }
    }

    #[test]
    fn rollout_contract() {
        let st = state();
        let c = Condition::single(1);
        let t = rollout(&st, &c, 3, &|_: &NoiseTensor<f64>, _: &Condition| 2.5).unwrap();
        assert_eq!(t.reward, 2.5);
        assert_eq!(t.step_logprobs.len(), 16);
        let s = sample_noise(&st, &c, 3, SampleMode::Stochastic, 1.0).unwrap();
        assert_eq!(t.total_logprob(), s.total_logprob);
        assert_eq!(t, rollout(&st, &c, 3, &|_: &NoiseTensor<f64>, _: &Condition| 2.5).unwrap());
    }

    #[test]
    fn policy_logprob_is_elementwise_sum() {
        let st = state();
        let c = Condition::single(0);
        let t = rollout(&st, &c, 9, &SyntheticReward { patch_size: 2 }).unwrap();
        let seq = patchify(&t.tensor, 2).unwrap();
        let params = st.forward_teacher_forced(&seq, &c).unwrap();
        let mut elementwise = 0.0;
        for (p, row) in params.iter().zip(seq.patches.rows()) {
            for e in 0..4 {
                elementwise += crate::gaussian::logpdf_element(row[e], p.mean[e], p.log_var[e]);
            }
        }
        assert!((t.total_logprob() - elementwise).abs() <= 1e-9);
    }

    #[test]
    fn synthetic_reward_shape() {
        let sh = TensorShape::new(1, 8, 8, 2).unwrap();
        let c = Condition::single(2);
        let mut rng = NoiseRng::new(1);
        let mut good = 0.0;
        for _ in 0..50 {
            let t: NoiseTensor<f64> = oracle_generate(&c, &sh, &mut rng).unwrap();
            let r = reward_synthetic(&t, &c, 2).unwrap();
            assert_eq!(r, reward_synthetic(&t, &c, 2).unwrap());
            good += r / 50.0;
        }
        // about -1.2 continuous, plus both bonuses most of the time
        assert!(good > 0.3, "{good}");
        let far = NoiseTensor::new(1, 8, 8, vec![1e6; 64]).unwrap();
        let r = reward_synthetic(&far, &c, 2).unwrap();
        assert!(r < -1e10);
        let nll = oracle_nll(&far, &c, 2).unwrap();
        assert_eq!(r, -nll);
    }

    #[test]
    fn pair_selection() {
        assert_eq!(select_pair(&[2.0, 2.0, 2.0], 3.0), None);
        assert_eq!(select_pair(&[5.0, 1.0], 3.0), Some((0, 1)));
        assert_eq!(select_pair(&[4.0, 2.0, 1.0], 3.0), None);
        assert_eq!(select_pair(&[4.0, 2.0, 0.5], 3.0), Some((0, 2)));
        assert_eq!(select_pair(&[1.0, 9.0, 9.0, 1.0], 3.0), Some((1, 0)));
        assert_eq!(select_pair(&[], 0.0), None);
    }

    #[test]
    fn build_pairs_filters_by_gap() {
        let st = state();
        let conds: Vec<Condition> = (0..3).map(Condition::single).collect();
        let spread = |t: &NoiseTensor<f64>, _: &Condition| 10.0 * t.values[0];
        let pairs = build_pairs(&st, &conds, 6, &spread, 3.0, 1).unwrap();
        assert!(!pairs.is_empty());
        for p in &pairs {
            assert!(p.gap() > 3.0);
            assert_eq!(p.preferred_score, 10.0 * p.preferred.values[0]);
        }
        assert_eq!(pairs, build_pairs(&st, &conds, 6, &spread, 3.0, 1).unwrap());
        assert!(build_pairs(&st, &conds, 6, &spread, f64::INFINITY, 1).unwrap().is_empty());
        assert!(build_pairs(&st, &conds, 1, &spread, 3.0, 1).is_err());
    }

    #[test]
    fn dpo_at_reference_is_ln2() {
        let st = state();
        let mut rng = NoiseRng::new(2);
        let pair = random_pair(&mut rng, 1);
        for beta in [0.1, 1.0, 25.0] {
            let (r, _) = dpo_loss(&st, &st, &[&pair], beta).unwrap();
            assert!((r.loss - std::f64::consts::LN_2).abs() <= 1e-12);
        }
        assert!(dpo_loss(&st, &st, &[&pair], 0.0).is_err());
        let other = ModelState::<f64>::init(ModelConfig::tiny()).unwrap();
        assert!(dpo_loss(&st, &other, &[&pair], 1.0).is_err());
    }

    #[test]
    fn dpo_loss_falls_as_preferred_gets_likelier() {
        let reference = state();
        let mut rng = NoiseRng::new(3);
        let mut pair = random_pair(&mut rng, 1);
        // shrinking the predicted variance raises logπ of a tensor sitting
        // exactly on the means
        pair.preferred = sample_noise(&reference, &pair.condition, 0, SampleMode::Deterministic, 1.0)
            .unwrap()
            .tensor;
        let mut losses = Vec::new();
        for shift in [0.0, -0.05, -0.1] {
            let mut policy = reference.clone();
            policy.weights.head.out.bias.slice_mut(s![4..]).mapv_inplace(|v| v + shift);
            losses.push(dpo_loss(&policy, &reference, &[&pair], 1.0).unwrap().0.loss);
        }
        assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
    }

    #[test]
    fn dpo_step_widens_margin() {
        let st = state();
        let mut rng = NoiseRng::new(4);
        let pairs: Vec<_> = (0..4).map(|i| random_pair(&mut rng, i)).collect();
        let refs: Vec<_> = pairs.iter().collect();
        let (r0, g) = dpo_loss(&st, &st, &refs, 1.0).unwrap();
        let mut next = st.clone();
        next.weights.add_scaled(&g, -0.05);
        let (r1, _) = dpo_loss(&next, &st, &refs, 1.0).unwrap();
        assert!(r1.margin > r0.margin);
        assert!(r1.loss < r0.loss);
    }

    #[test]
    fn preferred_nll_matches_scoring_and_ignores_rejected() {
        let st = state();
        let mut rng = NoiseRng::new(5);
        let pair = random_pair(&mut rng, 2);
        let (loss, g1) = preferred_nll_loss(&st, &[&pair]).unwrap();
        let (total, _) = sequence_logprob(&st, &pair.preferred, &pair.condition).unwrap();
        assert!((loss + total / 64.0).abs() < 1e-12);
        let mut other = pair.clone();
        other.rejected.values.iter_mut().for_each(|v| *v += 10.0);
        let (loss2, g2) = preferred_nll_loss(&st, &[&other]).unwrap();
        assert_eq!(loss, loss2);
        assert_eq!(g1, g2);
        let mut next = st.clone();
        next.weights.add_scaled(&g1, -0.01);
        assert!(preferred_nll_loss(&next, &[&pair]).unwrap().0 < loss);
    }

    #[test]
    fn zero_lr_finetune_is_identity() {
        let st = state();
        let mut rng = NoiseRng::new(6);
        let pairs: Vec<_> = (0..3).map(|i| random_pair(&mut rng, i)).collect();
        let cfg = TrainConfig {
            epochs: 2,
            base_lr: 0.0,
            ..TrainConfig::default()
        };
        for mode in [FinetuneMode::PreferredNll, FinetuneMode::Dpo] {
            let (out, hist) = finetune(&st, &pairs, mode, &cfg, 1.0).unwrap();
            assert_eq!(out.weights, st.weights);
            assert_eq!(hist.len(), 2);
        }
    }

    #[test]
    fn pair_file_round_trip_and_errors() {
        let mut rng = NoiseRng::new(7);
        let set = PairSet {
            channels: 1,
            height: 8,
            width: 8,
            cond_max_len: 2,
            vocab_size: 16,
            pairs: (0..3).map(|i| random_pair(&mut rng, i)).collect::<Vec<_>>(),
        };
        let mut buf = Vec::new();
        write_pairs(&set, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"NARP");
        let back: PairSet<f64> = read_pairs(buf.as_slice()).unwrap();
        let mut again = Vec::new();
        write_pairs(&back, &mut again).unwrap();
        assert_eq!(again, buf);
        assert_eq!(back.pairs.len(), 3);
        assert!(matches!(read_pairs::<f64, _>(&buf[..buf.len() - 2]), Err(Error::Truncated { .. })));
        let mut bad = buf.clone();
        bad[0] = b'M';
        assert!(matches!(read_pairs::<f64, _>(bad.as_slice()), Err(Error::CorruptHeader { .. })));
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn selection_depends_on_score_multiset(
            scores in prop::collection::vec(-5i32..5, 2..20),
            gap in 0.0..6.0f64,
            seed in any::<u64>(),
        ) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let mut shuffled = scores.clone();
            NoiseRng::new(seed).shuffle(&mut shuffled);
            let pick = |s: &[f64]| select_pair(s, gap).map(|(b, w)| (s[b], s[w]));
            prop_assert_eq!(pick(&scores), pick(&shuffled));
            if let Some((b, w)) = select_pair(&scores, gap) {
                prop_assert!(scores[b] - scores[w] > gap);
                prop_assert!(scores[..b].iter().all(|&s| s < scores[b]));
                prop_assert!(scores[..w].iter().all(|&s| s > scores[w]));
            }
        }
    }
}
