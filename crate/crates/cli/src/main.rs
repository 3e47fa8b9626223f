//! `advcorr`: pretrain, attack, fine-tune, retrain and evaluate from the
//! command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::FinetuneOverrides;
use config::RunConfig;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    const CONFIG: u8 = 2;
    const DATA: u8 = 3;
    const NUMERICAL: u8 = 4;

    pub fn data(message: String) -> Self {
        Self {
            code: Self::DATA,
            message,
        }
    }
}

impl From<advcorr_core::Error> for CliError {
    fn from(e: advcorr_core::Error) -> Self {
        use advcorr_core::Error::*;
        let code = match &e {
            Config(_) => Self::CONFIG,
            Shape { .. }
            | Parse { .. }
            | Shortfall(_)
            | Checkpoint(_)
            | Io { .. }
            | Json(_)
            | Csv(_) => Self::DATA,
            Domain(_) | Infeasible(_) | Numerical(_) => Self::NUMERICAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "advcorr",
    version,
    about = "Adversary-correction fine-tuning of dense ReLU classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for training, attacks and block sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write `model.json` and `pretrain_metrics.json`.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Build an adversarial set for a checkpoint and write `adv.json`.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of adversarial examples; a multiple of the class count.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Fine-tune a checkpoint against an adversarial set.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        adv: PathBuf,
        /// Weight of the loss against the violation in model selection.
        #[arg(long)]
        omega: Option<f64>,
        /// Number of cutting-plane iterations.
        #[arg(long)]
        iters: Option<usize>,
        /// Required logit margin.
        #[arg(long)]
        delta: Option<f64>,
        /// Radius of the input ball each cut also covers.
        #[arg(long = "epsilon-bar")]
        epsilon_bar: Option<f64>,
        /// Allowed increase of the training loss.
        #[arg(long)]
        xi: Option<f64>,
        /// Fraction of weights fixed per block-coordinate sweep; enables the block solver.
        #[arg(long = "block-p")]
        block_p: Option<f64>,
        /// Block-coordinate sweeps per iteration; enables the block solver.
        #[arg(long = "block-T")]
        block_t: Option<usize>,
        /// Include candidate parameters in `pool.json`.
        #[arg(long = "dump-params")]
        dump_params: bool,
    },
    /// Retrain from scratch with the adversarial set appended to the training data.
    BaselineRetrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        adv: PathBuf,
    },
    /// Score a checkpoint; with `--adv`, also its violation on that set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        adv: Option<PathBuf>,
    },
}

fn resolve(common: &Common, tweak: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(n) = common.threads {
        cfg.threads = Some(n);
    }
    tweak(&mut cfg);
    cfg.validate()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError {
                code: CliError::CONFIG,
                message: format!("cannot start {n} worker threads: {e}"),
            })?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain { common } => commands::pretrain_cmd(resolve(&common, |_| {})?),
        Command::Attack {
            common,
            checkpoint,
            size,
        } => {
            let cfg = resolve(&common, |c| {
                if let Some(n) = size {
                    c.adv_size = n;
                }
            })?;
            commands::attack_cmd(cfg, &checkpoint)
        }
        Command::Finetune {
            common,
            checkpoint,
            adv,
            omega,
            iters,
            delta,
            epsilon_bar,
            xi,
            block_p,
            block_t,
            dump_params,
        } => {
            let overrides = FinetuneOverrides {
                omega,
                iters,
                delta,
                epsilon_bar,
                xi,
                block_p,
                block_t,
            };
            let cfg = resolve(&common, |c| overrides.apply(c))?;
            commands::finetune_cmd(cfg, &checkpoint, &adv, dump_params)
        }
        Command::BaselineRetrain {
            common,
            checkpoint,
            adv,
        } => commands::baseline_cmd(resolve(&common, |_| {})?, &checkpoint, &adv),
        Command::Eval {
            common,
            checkpoint,
            adv,
        } => commands::eval_cmd(resolve(&common, |_| {})?, &checkpoint, adv.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
