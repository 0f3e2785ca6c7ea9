//! `taskflip`: synthesize toy data, train the toy model, learn a universal
//! task-override segment, evaluate it and render reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use taskflip::attack::{Preset, Reduction};
use taskflip::TaskTag;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "taskflip",
    version,
    about = "Universal prepended segments that flip a speech model from transcription to translation"
)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic tone-chip dataset: WAVs, manifest and generator spec.
    SynthData(SynthArgs),
    /// Train the toy multi-task model on the manifest's train split.
    TrainToy(TrainArgs),
    /// Decode translate-mode targets for the train split on clean audio.
    GenTargets(TargetArgs),
    /// Learn a universal segment on the train split.
    LearnAttack(AttackArgs),
    /// Evaluate on the test split, with or without a segment.
    Evaluate(EvalArgs),
    /// Render tables, recall curves and histograms from evaluation runs.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of utterances.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub alphabet_size: usize,
    /// Samples per symbol.
    #[arg(long, default_value_t = 800)]
    pub chip_length: usize,
    #[arg(long, default_value_t = 0.02)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Map every symbol to itself instead of the reversed default.
    #[arg(long)]
    pub identity_mapping: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Generator spec; defaults to `spec.json` beside the manifest.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory; the checkpoint is written to `model.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub min_steps: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Adapter id.
    #[arg(long, default_value = "toy")]
    pub adapter: String,
    /// Adapter checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct TargetArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ReductionArg {
    Utterance,
    Token,
}

impl From<ReductionArg> for Reduction {
    fn from(r: ReductionArg) -> Self {
        match r {
            ReductionArg::Utterance => Reduction::PerUtterance,
            ReductionArg::Token => Reduction::PerToken,
        }
    }
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Named budget; excludes --epsilon and --frames.
    #[arg(long, value_parser = parse_preset, conflicts_with_all = ["epsilon", "frames"])]
    pub preset: Option<Preset>,
    /// Amplitude bound (requires --frames).
    #[arg(long, requires = "frames")]
    pub epsilon: Option<f64>,
    /// Segment length in samples (requires --epsilon).
    #[arg(long, requires = "epsilon")]
    pub frames: Option<usize>,
    #[arg(long, default_value_t = 500)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Defaults to the preset's rate, or 1e-3 for explicit budgets.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Initial noise amplitude as a fraction of epsilon (0 starts from silence).
    #[arg(long, default_value_t = 0.1)]
    pub init_scale: f64,
    #[arg(long, value_enum, default_value_t = ReductionArg::Utterance)]
    pub reduction: ReductionArg,
    /// Steps between checkpoints and best-segment evaluations.
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: u64,
    /// Precomputed targets (`targets.jsonl`); generated when absent.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Segment stem or file; omitted for the unattacked rows.
    #[arg(long)]
    pub segment: Option<PathBuf>,
    #[arg(long, value_parser = parse_task, default_value = "tc")]
    pub mode: TaskTag,
    /// Row label; derived from the segment and mode when absent.
    #[arg(long)]
    pub label: Option<String>,
    /// Score against the hypotheses of an earlier evaluation (its output
    /// directory) instead of the reference translations.
    #[arg(long)]
    pub against: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Evaluation output directories.
    #[arg(long = "run", num_args = 1..)]
    pub runs: Vec<PathBuf>,
    /// Report fixture with published reference numbers.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long, default_value = "Evaluation report")]
    pub title: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse()
}

fn parse_task(s: &str) -> Result<TaskTag, String> {
    s.parse()
        .map_err(|_| format!("unknown mode {s:?} (expected tc or tl)"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::SynthData(a) => commands::synth_data(a),
        Command::TrainToy(a) => commands::train_toy(a),
        Command::GenTargets(a) => commands::gen_targets(a),
        Command::LearnAttack(a) => commands::learn_attack(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
