mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status contract: 0 success, 1 any other failure, 2 configuration
/// error, 3 numerical failure.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] distillvol::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(distillvol::Error::Config(_)) => 2,
            CliError::Core(distillvol::Error::NonFinite { .. }) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "distillvol",
    version,
    about = "Teacher ensembles, pseudo-labeling and student distillation for 3D tumor segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the root seed of the experiment file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory of the experiment file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one network on the labeled training split.
    Train(Common),
    /// Annotate unlabeled cases with the averaged ensemble.
    EnsembleLabel {
        #[command(flatten)]
        common: Common,
        /// Threshold pseudo-labels at 0.5 instead of keeping probabilities.
        #[arg(long)]
        hard_labels: bool,
    },
    /// Train the student on manual plus ensemble labels.
    Distill(Common),
    /// Score a checkpoint on the evaluation split.
    Evaluate(Common),
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Accepted for interface uniformity; the suite has fixed seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Adds an operation with a deliberately wrong backward pass.
        #[arg(long, hide = true)]
        include_corrupted: bool,
    },
    /// Write synthetic cases.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Extents as D,H,W.
        #[arg(long, value_delimiter = ',', default_values_t = [32, 32, 32])]
        extents: Vec<usize>,
        /// Omit segmentations.
        #[arg(long)]
        unlabeled: bool,
    },
    /// Convert uncompressed NIfTI files into the native case layout.
    Import {
        /// Name-mapping file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("DISTILLVOL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("DISTILLVOL_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failed(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::EnsembleLabel { common, hard_labels } => commands::ensemble_label(&common, hard_labels),
        Command::Distill(c) => commands::distill(&c),
        Command::Evaluate(c) => commands::evaluate(&c),
        Command::Gradcheck { include_corrupted, .. } => commands::gradcheck(include_corrupted),
        Command::Synth {
            seed,
            count,
            out,
            extents,
            unlabeled,
        } => {
            let extents: [usize; 3] = extents
                .try_into()
                .map_err(|e: Vec<usize>| CliError::Config(format!("--extents needs D,H,W, got {e:?}")))?;
            commands::synth(seed, count, &out, extents, unlabeled)
        }
        Command::Import { config, out, .. } => commands::import(&config, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
