use std::path::{Path, PathBuf};

use clap::Args;
use log::info;
use noisear::data::{self, generate_dataset, Dataset};
use noisear::eval::{audit_causality, evaluate, estimate_flops};
use noisear::model::checkpoint;
use noisear::pref::{self, build_pairs, finetune, mean_margin, FinetuneMode, PairSet, SyntheticReward};
use noisear::sample::{sample_noise, sequence_logprob};
use noisear::train::fit_with;
use noisear::{ModelState, SampleMode};

use crate::tensor_io::{
    format_condition, key_values, parse_condition, parse_conditions, quantize, read_raw, sidecar_path, write_raw,
    write_text,
};
use crate::{CliError, ConfigArgs};

fn pick(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Config(format!("--{name} is required")))
}

fn load_model(path: &Path) -> Result<ModelState<f64>, CliError> {
    checkpoint::load(path).map_err(CliError::at(path))
}

fn load_data(path: &Path) -> Result<Dataset<f64>, CliError> {
    data::load(path).map_err(CliError::at(path))
}

fn save_model(state: &ModelState<f64>, path: &Path) -> Result<(), CliError> {
    checkpoint::save(state, path).map_err(CliError::at(path))
}

#[derive(Debug, Args)]
pub struct GenData {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record count; overrides `data.records`.
    #[arg(long)]
    n: Option<usize>,
    /// Overrides `data.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl GenData {
    pub fn run(self) -> Result<(), CliError> {
        let cfg = self.cfg.load()?;
        let out = pick(&self.out, &cfg.paths.data, "out")?;
        let n = self.n.unwrap_or(cfg.data.records);
        let seed = self.seed.unwrap_or(cfg.data.seed);
        let m = &cfg.model;
        let d: Dataset<f64> = generate_dataset(&m.shape, n, cfg.data.tokens, m.cond_max_len, m.vocab_size, seed)?;
        data::save(&d, &out).map_err(CliError::at(&out))?;
        info!("wrote {n} records to {}", out.display());
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Train {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics; defaults to `<out>.metrics`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

impl Train {
    pub fn run(self) -> Result<(), CliError> {
        let cfg = self.cfg.load()?;
        let data_path = pick(&self.data, &cfg.paths.data, "data")?;
        let d = load_data(&data_path)?;
        d.check_shape(&cfg.model.shape)?;
        let init = ModelState::<f64>::init(cfg.model.clone())?;
        let metrics_path = self.metrics.unwrap_or_else(|| {
            let mut s = self.out.as_os_str().to_owned();
            s.push(".metrics");
            PathBuf::from(s)
        });
        let mut log = String::from("epoch nll recon total lr\n");
        let (state, _) = fit_with(&init, &d, &cfg.train, |r, _| {
            log.push_str(&r.log_line());
            log.push('\n');
            Ok(())
        })?;
        write_text(&metrics_path, &log)?;
        save_model(&state, &self.out)
    }
}

#[derive(Debug, Args)]
pub struct Sample {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated condition tokens.
    #[arg(long)]
    cond: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "stochastic")]
    mode: SampleMode,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Raw little-endian f32 output; the sidecar goes to `<out>.meta`.
    #[arg(long)]
    out: PathBuf,
}

impl Sample {
    pub fn run(self) -> Result<(), CliError> {
        let c = parse_condition(&self.cond)?;
        let state = load_model(&self.model)?;
        let r = sample_noise(&state, &c, self.seed, self.mode, self.temperature)?;
        // score what is actually written so `score` reproduces it
        let written = quantize(&r.tensor);
        let (total, _) = sequence_logprob(&state, &written, &c)?;
        write_raw(&self.out, &r.tensor)?;
        let meta = key_values(&[
            ("channels", written.channels.to_string()),
            ("height", written.height.to_string()),
            ("width", written.width.to_string()),
            ("condition", format_condition(&c)),
            ("seed", self.seed.to_string()),
            ("mode", self.mode.to_string()),
            ("temperature", self.temperature.to_string()),
            ("total_logprob", total.to_string()),
        ]);
        write_text(&sidecar_path(&self.out), &meta)
    }
}

#[derive(Debug, Args)]
pub struct Score {
    #[arg(long)]
    model: PathBuf,
    /// Raw little-endian f32 tensor in the model's shape.
    #[arg(long)]
    tensor: PathBuf,
    #[arg(long)]
    cond: String,
}

impl Score {
    pub fn run(self) -> Result<(), CliError> {
        let c = parse_condition(&self.cond)?;
        let state = load_model(&self.model)?;
        let sh = state.config.shape;
        let t = read_raw(&self.tensor, sh.channels, sh.height, sh.width)?;
        let (total, _) = sequence_logprob(&state, &t, &c)?;
        print!(
            "{}",
            key_values(&[
                ("total_logprob", total.to_string()),
                ("nll_per_element", (-total / sh.numel() as f64).to_string()),
            ])
        );
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Eval {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

impl Eval {
    pub fn run(self) -> Result<(), CliError> {
        let cfg = self.cfg.load()?;
        let model_path = pick(&self.model, &cfg.paths.model, "model")?;
        let data_path = pick(&self.data, &cfg.paths.data, "data")?;
        let state = load_model(&model_path)?;
        let d = load_data(&data_path)?;
        let report = evaluate(&state, &d, cfg.eval.audit_trials, cfg.eval.seed)?.to_string();
        if let Some(p) = &self.report {
            write_text(p, &report)?;
        }
        print!("{report}");
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Pairs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    /// `;`-separated conditions of comma-separated tokens, e.g. `0;1,2;5`.
    #[arg(long)]
    conds: String,
    /// Overrides `pref.rollouts`.
    #[arg(long)]
    rollouts: Option<usize>,
    /// Overrides `pref.gap`; `inf` disables every pair.
    #[arg(long)]
    gap: Option<f64>,
    /// Overrides `pref.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Pairs {
    pub fn run(self) -> Result<(), CliError> {
        let cfg = self.cfg.load()?;
        let model_path = pick(&self.model, &cfg.paths.model, "model")?;
        let out = pick(&self.out, &cfg.paths.pairs, "out")?;
        let conds = parse_conditions(&self.conds)?;
        if conds.is_empty() {
            return Err(CliError::Config("--conds lists no conditions".into()));
        }
        let state = load_model(&model_path)?;
        for c in &conds {
            c.validate(state.config.vocab_size, state.config.cond_max_len)?;
        }
        let reward = SyntheticReward {
            patch_size: state.config.shape.patch_size,
        };
        let pairs = build_pairs(
            &state,
            &conds,
            self.rollouts.unwrap_or(cfg.pref.rollouts),
            &reward,
            self.gap.unwrap_or(cfg.pref.gap),
            self.seed.unwrap_or(cfg.pref.seed),
        )?;
        info!("{} of {} conditions produced a pair", pairs.len(), conds.len());
        let sh = state.config.shape;
        let set = PairSet {
            channels: sh.channels,
            height: sh.height,
            width: sh.width,
            cond_max_len: state.config.cond_max_len,
            vocab_size: state.config.vocab_size,
            pairs,
        };
        pref::save(&set, &out).map_err(CliError::at(&out))
    }
}

#[derive(Debug, Args)]
pub struct Dpo {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// `preferred-nll` or `dpo`; overrides `pref.mode`.
    #[arg(long)]
    mode: Option<FinetuneMode>,
    /// Overrides `pref.beta`.
    #[arg(long)]
    beta: Option<f64>,
    /// Fine-tuned checkpoint.
    #[arg(long)]
    out: PathBuf,
}

impl Dpo {
    pub fn run(self) -> Result<(), CliError> {
        let cfg = self.cfg.load()?;
        let model_path = pick(&self.model, &cfg.paths.model, "model")?;
        let pairs_path = pick(&self.pairs, &cfg.paths.pairs, "pairs")?;
        let beta = self.beta.unwrap_or(cfg.pref.beta);
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(CliError::Config(format!("beta must be positive, got {beta}")));
        }
        let state = load_model(&model_path)?;
        let set: PairSet<f64> = pref::load(&pairs_path).map_err(CliError::at(&pairs_path))?;
        let sh = state.config.shape;
        if (set.channels, set.height, set.width) != (sh.channels, sh.height, sh.width) {
            return Err(CliError::Config("pair tensors do not match the model shape".into()));
        }
        let before = mean_margin(&state, &set.pairs)?;
        let (tuned, history) = if cfg.train.epochs == 0 || set.pairs.is_empty() {
            (state, Vec::new())
        } else {
            finetune(&state, &set.pairs, self.mode.unwrap_or(cfg.pref.mode), &cfg.train, beta)?
        };
        for (i, l) in history.iter().enumerate() {
            info!("epoch {} loss {l}", i + 1);
        }
        let after = mean_margin(&tuned, &set.pairs)?;
        save_model(&tuned, &self.out)?;
        print!(
            "{}",
            key_values(&[
                ("pairs", set.pairs.len().to_string()),
                ("margin_before", before.to_string()),
                ("margin_after", after.to_string()),
            ])
        );
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Flops {
    #[command(flatten)]
    cfg: ConfigArgs,
}

impl Flops {
    pub fn run(self) -> Result<(), CliError> {
        let cfg = self.cfg.load()?;
        let params = ModelState::<f32>::init(cfg.model.clone())?.weights.num_params();
        print!(
            "{}",
            key_values(&[
                ("flops_estimate", estimate_flops(&cfg.model).to_string()),
                ("parameters", params.to_string()),
            ])
        );
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Audit {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Audit {
    pub fn run(self) -> Result<(), CliError> {
        let state = load_model(&self.model)?;
        let dev = audit_causality(&state, self.trials, self.seed)?;
        print!(
            "{}",
            key_values(&[
                ("trials", self.trials.to_string()),
                ("causality_max_deviation", dev.to_string()),
                ("causal", (dev <= 1e-6).to_string()),
            ])
        );
        Ok(())
    }
}
