//! `shiftadd` command line: training, reparameterization, evaluation,
//! kernel benchmarks, energy audits and dispatch maps. Every command writes
//! machine-readable CSV/JSON into an output directory together with the
//! resolved configuration.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use shiftadd_core::LinearMode;

pub use config::{Overrides, RunConfig};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] shiftadd_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Numeric(_) | CliError::Core(shiftadd_core::Error::Numeric(_)) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "shiftadd", version, about = "Multiplication-reduced ViT toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Seed; falls back to the config, then to SHIFTADD_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides run.out_dir).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Override any config value, e.g. `--set train.lr=0.1`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

impl Common {
    pub fn resolve(&self, steps: Option<usize>, lambda: Option<f64>) -> Result<RunConfig, CliError> {
        RunConfig::resolve(
            self.config.as_deref(),
            &Overrides {
                seed: self.seed,
                out: self.out.clone(),
                steps,
                lambda,
                set: self.set.clone(),
            },
        )
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a dense model from scratch, or continue a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue training this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Weight of the MoE balancing losses (0 disables them).
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Convert a checkpoint to the next stage and finetune it.
    Reparam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long, value_enum)]
        mlp_mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        attn_linear_mode: Option<ModeArg>,
        /// Finetuning steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Accuracy, loss and dispatch shares on the train and test splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Time matmul, add, shift and fake-shift kernels.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Kernels to time; matmul is always timed as the baseline.
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = bench::Kernel::ALL)]
        kernel: Vec<bench::Kernel>,
        /// `MxKxN` or `BxMxKxN` shapes.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "1x64x64x64,1x196x384x384,4x196x384x1536"
        )]
        shapes: Vec<String>,
        #[arg(long, default_value_t = 15)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Worker threads for the kernels.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Per-layer and per-class energy of one image under a cost table.
    Energy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON cost table (overrides cost.table).
        #[arg(long)]
        cost_table: Option<PathBuf>,
    },
    /// Per-token expert assignments of the first MoE layer.
    DispatchMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Write the configured dataset to a container file.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Destination file (default: <out>/dataset.bin).
        #[arg(long)]
        path: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Dense,
    Shift,
    Moe,
}

impl From<ModeArg> for LinearMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Dense => LinearMode::Dense,
            ModeArg::Shift => LinearMode::Shift,
            ModeArg::Moe => LinearMode::Moe,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            common,
            resume,
            steps,
            lambda,
        } => commands::train(&common.resolve(steps, lambda)?, resume.as_deref()),
        Command::Reparam {
            common,
            checkpoint,
            stage,
            mlp_mode,
            attn_linear_mode,
            steps,
            lambda,
        } => {
            let mut cfg = common.resolve(steps, lambda)?;
            if let Some(m) = mlp_mode {
                cfg.reparam.mlp_mode = m.into();
            }
            if let Some(m) = attn_linear_mode {
                cfg.reparam.attn_linear_mode = m.into();
            }
            commands::reparam(&cfg, &checkpoint, stage)
        }
        Command::Eval { common, checkpoint } => commands::eval(&common.resolve(None, None)?, &checkpoint),
        Command::Bench {
            common,
            kernel,
            shapes,
            reps,
            warmup,
            threads,
        } => {
            let cfg = common.resolve(None, None)?;
            let opts = bench::BenchOptions {
                kernels: kernel,
                shapes: shapes
                    .iter()
                    .map(|s| bench::Shape::parse(s))
                    .collect::<Result<_, _>>()?,
                reps,
                warmup,
                threads,
                seed: cfg.seed(),
            };
            bench::run(&cfg, &opts)
        }
        Command::Energy {
            common,
            checkpoint,
            cost_table,
        } => {
            let mut cfg = common.resolve(None, None)?;
            if cost_table.is_some() {
                cfg.cost.table = cost_table;
            }
            commands::energy_cmd(&cfg, &checkpoint)
        }
        Command::DispatchMap {
            common,
            checkpoint,
            split,
        } => commands::dispatch_map(&common.resolve(None, None)?, &checkpoint, split),
        Command::GenData { common, path } => commands::gen_data(&common.resolve(None, None)?, path.as_deref()),
    }
}
