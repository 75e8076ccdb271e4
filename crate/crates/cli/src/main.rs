//! `noisear` command-line tool. Exit codes: 0 success, 2 configuration or
//! validation error, 3 I/O error, 4 non-finite loss.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod tensor_io;

use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] noisear::Error),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Attaches `path` to bare I/O failures coming out of the library.
    pub fn at(path: &Path) -> impl FnOnce(noisear::Error) -> Self + '_ {
        move |e| match e {
            noisear::Error::Io(source) => Self::io(path, source),
            other => Self::Core(other),
        }
    }

    pub fn exit_code(&self) -> u8 {
        use noisear::Error as E;
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } => 3,
            Self::Core(E::Io(_) | E::Truncated { .. } | E::CorruptHeader { .. }) => 3,
            Self::Core(E::NonFinite { .. }) => 4,
            Self::Core(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "noisear", version, about = "Autoregressive prior over diffusion initial noise")]
struct Cli {
    /// Worker threads for parallel evaluation and rollouts.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output on standard error.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<config::RunConfig, CliError> {
        config::RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write oracle records to a NARD file.
    GenData(commands::GenData),
    /// Train from the configured initialization; writes a NARC checkpoint and a metrics log.
    Train(commands::Train),
    /// Sample one tensor; writes raw f32 values and a `.meta` sidecar.
    Sample(commands::Sample),
    /// Log-probability of a raw f32 tensor.
    Score(commands::Score),
    /// Held-out NLL, oracle and baseline NLL, calibration, audit, cost.
    Eval(commands::Eval),
    /// Roll out the prior and write gap-filtered preference pairs.
    Pairs(commands::Pairs),
    /// Fine-tune on preference pairs.
    Dpo(commands::Dpo),
    /// Forward-pass FLOPs for a configuration.
    Flops(commands::Flops),
    /// Causality audit of a checkpoint.
    Audit(commands::Audit),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::GenData(c) => c.run(),
        Command::Train(c) => c.run(),
        Command::Sample(c) => c.run(),
        Command::Score(c) => c.run(),
        Command::Eval(c) => c.run(),
        Command::Pairs(c) => c.run(),
        Command::Dpo(c) => c.run(),
        Command::Flops(c) => c.run(),
        Command::Audit(c) => c.run(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
