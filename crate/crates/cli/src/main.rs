//! `ticft` command line: data generation, pretraining, fine-tuning, sampling,
//! evaluation and ablation sweeps.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ticft::experiment::Variant;
use ticft::layout::Task;

/// A configuration problem; exits with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Parser, Debug)]
#[command(name = "ticft", version, about = "Temporal in-context fine-tuning for toy sequence diffusion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, short = 'c', global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    task: Option<Task>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for sampling and evaluation.
    #[arg(long, default_value_t = 1, global = true)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the pretraining corpus and the task's train/eval splits.
    GenData,
    /// Homogeneous-noise pretraining.
    Pretrain {
        /// Continue from this pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Masked-loss fine-tuning on the task's train split.
    Finetune {
        /// Pretraining or fine-tuning checkpoint [default: <out_dir>/pretrain.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sample the eval split and dump PGM frames, raw frames and traces.
    Sample {
        /// [default: <out_dir>/finetune.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "ticft")]
        variant: Variant,
        /// Buffer length override.
        #[arg(long)]
        buffer: Option<usize>,
        /// Number of eval samples [default: all].
        #[arg(long)]
        count: Option<usize>,
        /// Output directory [default: <out_dir>/samples/<variant>-b<B>].
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score sampled frames against the eval split.
    Eval {
        /// Directory written by `sample`.
        #[arg(long)]
        samples: PathBuf,
    },
    /// Sweep variants and buffer lengths and write the aggregate table.
    Ablate {
        /// [default: <out_dir>/finetune.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated variants [default: all].
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        /// Comma-separated buffer lengths [default: the task preset's].
        #[arg(long, value_delimiter = ',')]
        buffers: Vec<usize>,
        #[arg(long)]
        count: Option<usize>,
    },
}

/// 2 for configuration problems, 3 for IO and file-format problems, 4 for
/// numeric failures, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<clap::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<ticft::Error>() {
            return match e {
                ticft::Error::InvalidArgument(_) | ticft::Error::Shape(_) => 2,
                ticft::Error::Io { .. } | ticft::Error::Format(_) => 3,
                ticft::Error::Numeric(_) => 4,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData => commands::gen_data(&cli.common),
        Command::Pretrain { resume } => commands::pretrain(&cli.common, resume),
        Command::Finetune { checkpoint } => commands::finetune(&cli.common, checkpoint),
        Command::Sample {
            checkpoint,
            variant,
            buffer,
            count,
            output,
        } => commands::sample(&cli.common, checkpoint, variant, buffer, count, output),
        Command::Eval { samples } => commands::eval(&cli.common, &samples),
        Command::Ablate {
            checkpoint,
            variants,
            buffers,
            count,
        } => commands::ablate(&cli.common, checkpoint, variants, buffers, count),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
