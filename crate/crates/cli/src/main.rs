//! `nvae`: train N-VAE models and run their diagnostics from the shell.
//!
//! Exit codes: 0 success, 1 other failure, 2 missing input file, 3 training
//! diverged, 4 checkpoint version mismatch, 5 invalid configuration,
//! 64 command-line usage error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "nvae", version, about = "Train and analyse N-VAE models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct OutArgs {
    /// Directory for every file the command writes.
    #[arg(long, env = "NVAE_OUT_DIR", default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Decode sweeps of single latent coordinates over (−3, 3).
    Traverse(TraverseArgs),
    /// Draw class-conditional samples with z ~ N(0, σ²I).
    Sample(SampleArgs),
    /// Latent-space diagnostics on a dataset.
    Diagnose {
        #[command(subcommand)]
        what: DiagnoseCommand,
    },
    /// Train probe classifiers on real data with generated substitutes.
    Augment(AugmentArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args)]
pub struct TraverseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Traverse every shared dimension.
    #[arg(long, conflicts_with = "class")]
    pub shared: bool,
    /// Traverse every dimension of this class's block.
    #[arg(long)]
    pub class: Option<usize>,
    /// Class used for decoding in a shared traversal.
    #[arg(long, default_value_t = 0)]
    pub label: usize,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Start from the encoding of this test example instead of the origin;
    /// needs `--config` for the data.
    #[arg(long, requires = "config")]
    pub input_index: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub class: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Subcommand)]
pub enum DiagnoseCommand {
    /// Mean KL per latent dimension.
    Kl(DiagnoseArgs),
    /// Class-by-block mean KL matrix.
    Confusion(DiagnoseArgs),
    /// Surrogate classification gap and its empirical bound.
    Gap(DiagnoseArgs),
}

#[derive(Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config whose `[data]` section names the dataset.
    #[arg(long)]
    pub config: PathBuf,
    /// Use the training split instead of the test split.
    #[arg(long)]
    pub train_split: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    pub p_sub: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 10)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<nvae::Error>() {
            return match e {
                nvae::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
                nvae::Error::Diverged { .. } => 3,
                nvae::Error::VersionMismatch { .. } => 4,
                nvae::Error::Config { .. } => 5,
                _ => continue,
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let args: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Train(a) => commands::train(a, &args),
        Command::Traverse(a) => commands::traverse(a, &args),
        Command::Sample(a) => commands::sample(a, &args),
        Command::Diagnose { what } => commands::diagnose(what, &args),
        Command::Augment(a) => commands::augment(a, &args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
