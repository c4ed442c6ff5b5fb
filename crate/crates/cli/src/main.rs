//! `bandlift`: simulate degradations, train the codec and diffusion model,
//! upsample recordings and evaluate them.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit codes shared by all commands.
pub mod exit {
    pub const FAILURE: u8 = 1;
    pub const EMPTY_INPUT: u8 = 2;
    pub const DIVERGED: u8 = 3;
    pub const SILENT_INPUT: u8 = 4;
    pub const CHECKPOINT_MISMATCH: u8 = 5;
    pub const EVAL_FAILURES: u8 = 6;
    pub const USAGE: u8 = 64;
}

#[derive(Debug, Parser)]
#[command(name = "bandlift", version, about = "Latent-diffusion audio bandwidth extension")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw random lowpass degradations for a folder of clean WAVs and cache mel pairs.
    Simulate(SimulateArgs),
    /// Train the latent codec or the latent diffusion model from a simulated manifest.
    Train(TrainArgs),
    /// Extend the bandwidth of one recording to 48 kHz.
    Upsample(UpsampleArgs),
    /// Score a system against the cubic-resampling baseline over a manifest.
    Evaluate(EvaluateArgs),
    /// Print the detected roll-off frequency of a WAV file in Hz.
    Rolloff(RolloffArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Folder of clean WAV files (read non-recursively).
    #[arg(long = "in-dir")]
    pub in_dir: PathBuf,
    /// Manifest to write (JSON lines); mel pairs go to a sibling `<stem>.mels/` folder.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of records to draw, cycling over the files [default: one per file].
    #[arg(long)]
    pub n: Option<usize>,
    /// Master seed [default: `seed` from the config; one of them is required].
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Codec,
    Ldm,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Which model to train.
    #[arg(value_enum)]
    pub stage: Stage,
    /// Manifest written by `simulate`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint to write (rewritten periodically and at the end).
    #[arg(long)]
    pub out: PathBuf,
    /// Codec checkpoint for `ldm` training, or `reference` for the exact patch codec.
    #[arg(long)]
    pub codec: Option<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Master seed [default: `seed` from the config; one of them is required].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total optimizer steps [default: codec 2000, ldm 2000, or config].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Learning rate [default: codec 0.002, ldm 0.0001, or config].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Loss log CSV [default: `<out>.loss.csv`].
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Steps between loss rows [default: 10, or config].
    #[arg(long = "log-interval")]
    pub log_interval: Option<usize>,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Encoding {
    Pcm16,
    Float32,
}

#[derive(Debug, Args)]
pub struct UpsampleArgs {
    /// Input WAV at any sample rate.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output WAV at 48 kHz; a JSON sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Codec checkpoint, or `reference` for the exact patch codec.
    #[arg(long)]
    pub codec: String,
    /// Diffusion checkpoint.
    #[arg(long)]
    pub ldm: PathBuf,
    /// Sampling seed [default: 0, or config].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Classifier-free guidance scale [default: 3.5, or config].
    #[arg(long)]
    pub guidance: Option<f64>,
    /// DDIM steps [default: 50, or config].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Phase-reconstruction iterations of the reference vocoder [default: 32, or config].
    #[arg(long = "griffin-lim-iters")]
    pub griffin_lim_iters: Option<usize>,
    /// Output sample format.
    #[arg(long, value_enum, default_value_t = Encoding::Float32)]
    pub encoding: Encoding,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SystemKind {
    /// The full diffusion pipeline (needs --codec and --ldm).
    Model,
    /// Returns the observation resampled to 48 kHz.
    Identity,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Manifest of clean files and degradations.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output folder for `lsd.csv` and `lsd.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// System under test.
    #[arg(long, value_enum, default_value_t = SystemKind::Model)]
    pub system: SystemKind,
    /// Codec checkpoint, or `reference`.
    #[arg(long)]
    pub codec: Option<String>,
    /// Diffusion checkpoint.
    #[arg(long)]
    pub ldm: Option<PathBuf>,
    /// Classifier-free guidance scale [default: 3.5, or config].
    #[arg(long)]
    pub guidance: Option<f64>,
    /// DDIM steps [default: 50, or config].
    #[arg(long)]
    pub steps: Option<usize>,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RolloffArgs {
    /// WAV file to analyse.
    pub file: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Upsample(a) => commands::upsample(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Rolloff(a) => commands::rolloff(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{}", f.message);
            ExitCode::from(f.code)
        }
    }
}
