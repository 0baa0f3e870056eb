//! `bitalign` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bitalign", version, about = "Depth-bypassed affordance grounding on a frozen ViT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic RGB-D affordance dataset.
    GenData(GenData),
    /// Train a model and write a checkpoint plus its loss trace.
    Train(Train),
    /// Score a checkpoint against ground-truth heatmaps.
    Eval(Eval),
    /// Localise one action on one egocentric RGB-D pair.
    Infer(Infer),
    /// Finite-difference gradient checks for every module.
    Gradcheck(Gradcheck),
    /// Per-group parameter counts.
    Params(Params),
    /// Analytic forward FLOP estimate.
    Flops(Flops),
    /// Per-label attention-head weights from the TFG module.
    HeadStats(HeadStats),
    /// Train and evaluate a suite of variants under one budget.
    Ablate(Ablate),
}

#[derive(Debug, Args)]
pub struct GenData {
    /// JSON dataset spec; unset fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the spec cue mode: rgb | depth-critical | both.
    #[arg(long)]
    pub mode: Option<String>,
    /// Overrides the number of training samples.
    #[arg(long)]
    pub train: Option<usize>,
    /// Overrides the number of validation samples.
    #[arg(long)]
    pub val: Option<usize>,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct Train {
    /// Dataset directory; its class list replaces `text.labels`.
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` config file over the toy defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path; the loss trace goes to `<out>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `optim.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSON report path.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Replace an existing report.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct Infer {
    /// Egocentric RGB image (binary PPM).
    #[arg(long)]
    pub image: PathBuf,
    /// Depth map (binary PGM, 8 or 16 bit).
    #[arg(long)]
    pub depth: PathBuf,
    /// Action label from the checkpoint vocabulary.
    #[arg(long)]
    pub label: String,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// 8-bit PGM of the normalised map; values also go to `<out>.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct Gradcheck {
    /// One of diffcore, encoders, bpm, fusion, losses, pipeline (default: all).
    #[arg(long)]
    pub module: Option<String>,
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Params {
    #[arg(long, conflicts_with = "paper_scale")]
    pub config: Option<PathBuf>,
    /// Use the d=384, L=12, n=6, beta=22 accounting config.
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Debug, Args)]
pub struct Flops {
    #[arg(long, conflicts_with = "paper_scale")]
    pub config: Option<PathBuf>,
    /// Use the d=384, L=12, n=6, beta=22 accounting config.
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Debug, Args)]
pub struct HeadStats {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// CSV with one row per label.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Replace an existing CSV.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct Ablate {
    #[arg(long)]
    pub data: PathBuf,
    /// bpm-positions | fusion | adapter
    #[arg(long)]
    pub suite: String,
    /// Output directory for `<suite>.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Base config every variant starts from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training steps per variant.
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Overrides the base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Variants trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Replace an existing table.
    #[arg(long)]
    pub force: bool,
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, bad inputs, missing files or labels.
    Usage(String),
    /// Anything that fails after the inputs were accepted.
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Params(a) => commands::params(a),
        Command::Flops(a) => commands::flops(a),
        Command::HeadStats(a) => commands::head_stats(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
