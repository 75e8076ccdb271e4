//! Teacher-forced maximum-likelihood training with the reparameterized
//! reconstruction auxiliary, Adam, and cosine learning-rate decay.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{patch_matrices, Dataset};
use crate::error::{Error, Result};
use crate::gaussian::half_ln_2pi;
use crate::model::forward::Trace;
use crate::model::{Condition, ModelState, Weights};
use crate::patch::PatchSequence;
use crate::rng::NoiseRng;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub recon_weight: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Gradient reductions always run in a fixed order; the flag is kept so
    /// runs record that they asked for it.
    pub deterministic: bool,
    /// Global gradient-norm clip, off when `None`.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 40,
            base_lr: 6.25e-5,
            recon_weight: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_steps: 0,
            seed: 0,
            deterministic: true,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        // zero freezes the weights
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return bad("base_lr must be non-negative");
        }
        if !(self.recon_weight >= 0.0) || !self.recon_weight.is_finite() {
            return bad("recon_weight must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("Adam betas must lie in [0, 1) and epsilon must be positive");
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return bad("max_grad_norm must be positive");
            }
        }
        Ok(())
    }
}

/// Per-element losses. `total = nll + recon_weight·recon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub nll: f64,
    pub recon: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(nll: f64, recon: f64, recon_weight: f64) -> Self {
        Self {
            nll,
            recon,
            total: nll + recon_weight * recon,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.nll.is_finite() && self.recon.is_finite() && self.total.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: LossReport,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

impl EpochReport {
    /// `epoch nll recon total lr`
    pub fn log_line(&self) -> String {
        format!(
            "{} {} {} {} {}",
            self.epoch, self.loss.nll, self.loss.recon, self.loss.total, self.lr
        )
    }
}

/// Cosine decay from `base_lr` to zero, after an optional linear warmup.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(total_steps);
    if step < cfg.warmup_steps {
        return cfg.base_lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return cfg.base_lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub type Example<'a, T> = (&'a PatchSequence<T>, &'a Condition);

/// Per-element NLL/recon derivatives for a traced batch.
///
/// `targets` and `noise` are stacked `rows × K`, aligned with the trace.
/// Returns the loss report and `(d_mean, d_log_var)` of the normalized
/// objective.
pub(crate) fn nll_recon_terms<T: Scalar>(
    trace: &Trace<T>,
    clamp: (f64, f64),
    targets: ArrayView2<'_, T>,
    noise: ArrayView2<'_, T>,
    recon_weight: f64,
) -> (LossReport, Array2<T>, Array2<T>) {
    let means = trace.means();
    let log_vars = trace.log_vars(clamp);
    let n = T::from_usize(targets.len()).unwrap();
    let w = T::lit(recon_weight);
    let (half, two) = (T::lit(0.5), T::lit(2.0));
    let c = half_ln_2pi::<T>();
    let mut d_mean = Array2::zeros(targets.raw_dim());
    let mut d_lv = Array2::zeros(targets.raw_dim());
    let (mut nll, mut recon) = (T::zero(), T::zero());
    for (idx, &x) in targets.indexed_iter() {
        let (mu, lv, eps) = (means[idx], log_vars[idx], noise[idx]);
        let inv_var = (-lv).exp();
        let r = x - mu;
        nll += c + half * lv + half * r * r * inv_var;
        let sd = (half * lv).exp();
        let e = mu + sd * eps - x;
        recon += e * e;
        d_mean[idx] = ((mu - x) * inv_var + w * two * e) / n;
        d_lv[idx] = (half * (T::one() - r * r * inv_var) + w * e * eps * sd) / n;
    }
    let report = LossReport::new((nll / n).as_f64(), (recon / n).as_f64(), recon_weight);
    (report, d_mean, d_lv)
}

fn stack_targets<T: Scalar>(batch: &[Example<'_, T>]) -> Array2<T> {
    let views: Vec<_> = batch.iter().map(|(s, _)| s.patches.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("patch widths agree")
}

/// Loss and gradients with caller-supplied reparameterization noise
/// (`Σ M × K`, one row per predicted patch).
pub fn compute_loss_with_noise<T: Scalar>(
    state: &ModelState<T>,
    batch: &[Example<'_, T>],
    noise: ArrayView2<'_, T>,
    recon_weight: f64,
) -> Result<(LossReport, Weights<T>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    for (s, _) in batch {
        state.check_sequence(s)?;
    }
    let targets = stack_targets(batch);
    if noise.dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "noise is {:?}, targets are {:?}",
            noise.dim(),
            targets.dim()
        )));
    }
    let inputs: Vec<_> = batch
        .iter()
        .map(|(s, c)| (s.patches.slice(s![..s.len() - 1, ..]), *c))
        .collect();
    let trace = state.forward_traced(&inputs)?;
    let (report, d_mean, d_lv) =
        nll_recon_terms(&trace, state.config.log_var_clamp, targets.view(), noise, recon_weight);
    let grads = state.backward(&trace, d_mean.view(), d_lv.view());
    Ok((report, grads))
}

/// Loss and gradients for one batch, drawing reconstruction noise from
/// `rng` (one standard normal per element).
pub fn compute_loss<T: Scalar>(
    state: &ModelState<T>,
    batch: &[Example<'_, T>],
    rng: &mut NoiseRng,
    recon_weight: f64,
) -> Result<(LossReport, Weights<T>)> {
    let rows: usize = batch.iter().map(|(s, _)| s.len()).sum();
    let k = state.config.shape.patch_len();
    let noise = Array2::from_shape_simple_fn((rows, k), || rng.normal::<T>());
    compute_loss_with_noise(state, batch, noise.view(), recon_weight)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    m: Weights<T>,
    v: Weights<T>,
    step: i32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(like: &Weights<T>, cfg: &TrainConfig) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    pub fn step(&mut self, weights: &mut Weights<T>, grads: &Weights<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let (lr, eps) = (T::lit(lr), T::lit(self.epsilon));
        let g = grads.tensors();
        for (((w, m), v), g) in weights
            .slices_mut()
            .into_iter()
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
            .zip(g)
        {
            for i in 0..w.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

pub(crate) fn clip_grads<T: Scalar>(grads: &mut Weights<T>, max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let norm = grads.sq_norm().sqrt().as_f64();
        if norm > max {
            let k = T::lit(max / norm);
            for s in grads.slices_mut() {
                s.iter_mut().for_each(|g| *g *= k);
            }
        }
    }
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Trains on `data` and returns the updated model with one report per epoch.
pub fn fit<T: Scalar>(
    state: &ModelState<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<(ModelState<T>, Vec<EpochReport>)> {
    fit_with(state, data, cfg, |_, _| Ok(()))
}

/// [`fit`] with a hook called after every epoch, e.g. for checkpointing.
pub fn fit_with<T: Scalar>(
    state: &ModelState<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &ModelState<T>) -> Result<()>,
) -> Result<(ModelState<T>, Vec<EpochReport>)> {
    cfg.validate()?;
    let shape = state.config.shape;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let sequences: Vec<PatchSequence<T>> = patch_matrices(data, &shape)?
        .into_iter()
        .map(|p| PatchSequence { shape, patches: p })
        .collect();
    for r in &data.records {
        r.condition.validate(state.config.vocab_size, state.config.cond_max_len)?;
    }

    let mut state = state.clone();
    let mut adam = Adam::new(&state.weights, cfg);
    let mut order_rng = NoiseRng::new(cfg.seed);
    let mut recon_rng = NoiseRng::new(cfg.seed).split(0x005e_ed0f_2ec0);
    let per_epoch = steps_per_epoch(sequences.len(), cfg.batch_size);
    let total_steps = cfg.epochs * per_epoch;
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let (mut nll, mut recon, mut lr) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example<'_, T>> = chunk
                .iter()
                .map(|&i| (&sequences[i], &data.records[i].condition))
                .collect();
            let (report, mut grads) = compute_loss(&state, &batch, &mut recon_rng, cfg.recon_weight)?;
            if !report.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: format!("{report:?}"),
                });
            }
            clip_grads(&mut grads, cfg.max_grad_norm);
            lr = lr_schedule(step, total_steps, cfg);
            adam.step(&mut state.weights, &grads, lr);
            nll += report.nll;
            recon += report.recon;
            step += 1;
        }
        let report = EpochReport {
            epoch: epoch + 1,
            loss: LossReport::new(nll / per_epoch as f64, recon / per_epoch as f64, cfg.recon_weight),
            lr,
        };
        log::info!("epoch {}", report.log_line());
        on_epoch(&report, &state)?;
        history.push(report);
    }
    if !state.weights.all_finite() {
        return Err(Error::NonFinite {
            epoch: cfg.epochs,
            step,
            detail: "weights became non-finite".into(),
        });
    }
    Ok((state, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::model::ModelConfig;
    use crate::patch::TensorShape;

    fn tiny_batch(seed: u64) -> (ModelState<f64>, Vec<(PatchSequence<f64>, Condition)>) {
        let state = ModelState::init(ModelConfig {
            seed,
            ..ModelConfig::tiny()
        })
        .unwrap();
        let mut rng = NoiseRng::new(seed ^ 77);
        let rows = (0..3)
            .map(|i| {
                let p = Array2::from_shape_simple_fn((4, 4), || rng.normal());
                (
                    PatchSequence::new(state.config.shape, p).unwrap(),
                    Condition::new(vec![i as u32, (i + 1) as u32 % 4]),
                )
            })
            .collect();
        (state, rows)
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            base_lr: 1e-3,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, 100, &cfg), 1e-3);
        assert!(lr_schedule(100, 100, &cfg).abs() < 1e-18);
        assert!((lr_schedule(50, 100, &cfg) - 5e-4).abs() < 1e-15);
        let warm = TrainConfig {
            warmup_steps: 10,
            ..cfg
        };
        assert!((lr_schedule(0, 110, &warm) - 1e-4).abs() < 1e-15);
        assert_eq!(lr_schedule(10, 110, &warm), 1e-3);
        assert!((lr_schedule(60, 110, &warm) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn total_identity_and_zero_weight() {
        let (state, rows) = tiny_batch(1);
        let batch: Vec<Example<'_, f64>> = rows.iter().map(|(s, c)| (s, c)).collect();
        let (r, _) = compute_loss(&state, &batch, &mut NoiseRng::new(1), 0.2).unwrap();
        assert_eq!(r.total, r.nll + 0.2 * r.recon);
        let (r, _) = compute_loss(&state, &batch, &mut NoiseRng::new(1), 0.0).unwrap();
        assert_eq!(r.total, r.nll);
    }

    #[test]
    fn duplicated_rows_have_equal_losses() {
        let (state, rows) = tiny_batch(2);
        let one: Vec<Example<'_, f64>> = vec![(&rows[0].0, &rows[0].1)];
        let two: Vec<Example<'_, f64>> = vec![(&rows[0].0, &rows[0].1); 2];
        let (a, _) = compute_loss(&state, &one, &mut NoiseRng::new(3), 0.0).unwrap();
        let (b, _) = compute_loss(&state, &two, &mut NoiseRng::new(3), 0.0).unwrap();
        assert!((a.nll - b.nll).abs() < 1e-12);
    }

    #[test]
    fn standard_model_nll_on_standard_data() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            ..ModelConfig::default()
        };
        let mut state = ModelState::<f64>::init(cfg.clone()).unwrap();
        state.weights.head.out.weight.fill(0.0);
        let mut rng = NoiseRng::new(4);
        let rows: Vec<_> = (0..160)
            .map(|_| PatchSequence::new(cfg.shape, Array2::from_shape_simple_fn((16, 4), || rng.normal())).unwrap())
            .collect();
        let c = Condition::single(0);
        let batch: Vec<Example<'_, f64>> = rows.iter().map(|s| (s, &c)).collect();
        let (r, _) = compute_loss(&state, &batch, &mut rng, 0.2).unwrap();
        // 10240 elements
        assert!((r.nll - 1.4189).abs() < 0.05, "{}", r.nll);
    }

    #[test]
    fn one_step_descends() {
        for seed in 0..10 {
            let (state, rows) = tiny_batch(seed);
            let batch: Vec<Example<'_, f64>> = rows.iter().map(|(s, c)| (s, c)).collect();
            let noise = Array2::from_shape_simple_fn((12, 4), {
                let mut r = NoiseRng::new(seed);
                move || r.normal::<f64>()
            });
            let (before, grads) = compute_loss_with_noise(&state, &batch, noise.view(), 0.2).unwrap();
            let mut next = state.clone();
            let mut adam = Adam::new(&next.weights, &TrainConfig::default());
            adam.step(&mut next.weights, &grads, 1e-4);
            let (after, _) = compute_loss_with_noise(&next, &batch, noise.view(), 0.2).unwrap();
            assert!(after.total < before.total, "seed {seed}: {} -> {}", before.total, after.total);
        }
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let shape = TensorShape::new(1, 4, 4, 2).unwrap();
        let data = generate_dataset::<f64>(&shape, 10, 3, 3, 4, 0).unwrap();
        let state = ModelState::init(ModelConfig::tiny()).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            base_lr: 0.0,
            ..TrainConfig::default()
        };
        let (trained, hist) = fit(&state, &data, &cfg).unwrap();
        assert_eq!(hist.len(), 2);
        assert_eq!(trained.weights, state.weights);
    }

    #[test]
    fn recon_rng_irrelevant_without_recon_term() {
        let (state, rows) = tiny_batch(5);
        let batch: Vec<Example<'_, f64>> = rows.iter().map(|(s, c)| (s, c)).collect();
        let (_, g1) = compute_loss(&state, &batch, &mut NoiseRng::new(1), 0.0).unwrap();
        let (_, g2) = compute_loss(&state, &batch, &mut NoiseRng::new(2), 0.0).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (state, rows) = tiny_batch(6);
        assert!(compute_loss(&state, &[], &mut NoiseRng::new(0), 0.2).is_err());
        let other = PatchSequence::new(TensorShape::new(1, 8, 8, 2).unwrap(), Array2::zeros((16, 4))).unwrap();
        assert!(compute_loss(&state, &[(&other, &rows[0].1)], &mut NoiseRng::new(0), 0.2).is_err());
        let data = generate_dataset::<f64>(&TensorShape::new(1, 8, 8, 2).unwrap(), 4, 3, 3, 4, 0).unwrap();
        assert!(fit(&state, &data, &TrainConfig::default()).is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
