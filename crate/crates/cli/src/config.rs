//! Run configuration: a TOML document with a fixed schema, plus `--set
//! key=value` overrides applied before validation.
//!
//! ```toml
//! [model]            # ModelConfig; [model.shape] holds channels/height/width/patch_size
//! [train]            # TrainConfig
//! [data]             # records, tokens, seed
//! [pref]             # rollouts, gap, beta, mode, seed
//! [eval]             # audit_trials, seed
//! [paths]            # data, model, pairs: fallbacks for the matching flags
//! ```

use std::path::{Path, PathBuf};

use noisear::model::ModelConfig;
use noisear::pref::FinetuneMode;
use noisear::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub records: usize,
    /// Conditions are single tokens drawn from `0..tokens`.
    pub tokens: u32,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            records: 1000,
            tokens: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefConfig {
    pub rollouts: usize,
    pub gap: f64,
    pub beta: f64,
    pub mode: FinetuneMode,
    pub seed: u64,
}

impl Default for PrefConfig {
    fn default() -> Self {
        Self {
            rollouts: 20,
            gap: 3.0,
            beta: 1.0,
            mode: FinetuneMode::PreferredNll,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub audit_trials: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            audit_trials: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub pref: PrefConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Config(format!("configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        // zero epochs is meaningful for fine-tuning; training rejects it itself
        TrainConfig {
            epochs: self.train.epochs.max(1),
            ..self.train.clone()
        }
        .validate()?;
        if self.data.tokens == 0 || self.data.tokens as usize > self.model.vocab_size {
            return Err(CliError::Config(format!(
                "data.tokens must lie in 1..={}, got {}",
                self.model.vocab_size, self.data.tokens
            )));
        }
        if self.pref.rollouts < 2 {
            return Err(CliError::Config("pref.rollouts must be at least 2".into()));
        }
        if !(self.pref.gap >= 0.0) {
            return Err(CliError::Config("pref.gap must be non-negative".into()));
        }
        if !(self.pref.beta > 0.0) || !self.pref.beta.is_finite() {
            return Err(CliError::Config("pref.beta must be positive".into()));
        }
        if self.eval.audit_trials == 0 {
            return Err(CliError::Config("eval.audit_trials must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sets a dotted key. The value is read as a TOML value when it parses as
/// one and as a bare string otherwise.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
