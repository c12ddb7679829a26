//! `hades` command-line tool: configuration, training, decoding, passkey
//! evaluation, analysis and the closed-form calculators.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "hades", version, about = "Routed state-space language model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a complete configuration file for a named preset.
    InitConfig {
        /// Preset name: paper-370m or desk-tiny.
        #[arg(long)]
        preset: String,
        /// Destination; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes metrics.csv and checkpoints into the configured out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides HADES_SEED and the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Continue a byte prompt from a checkpoint.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        /// 0 decodes greedily.
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        /// Sampling seed; overrides HADES_SEED.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on the passkey retrieval grid and write the grid CSV.
    Passkey {
        #[arg(long)]
        ckpt: PathBuf,
        /// Use the full 1K-128K length grid instead of the desk grid.
        #[arg(long)]
        paper_grid: bool,
        /// Trials per cell; defaults to the grid's own setting.
        #[arg(long)]
        trials: Option<usize>,
        /// Comma-separated context lengths, replacing the grid's.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        /// Overrides HADES_SEED and the grid seed.
        #[arg(long)]
        seed: Option<u64>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diagnostics over a checkpoint and an input byte file.
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
    /// Parameter counts, closed form and constructed.
    Params {
        #[arg(long)]
        config: PathBuf,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Per-layer FLOPs of the routed mixer against the unrouted baseline.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seqlen: usize,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient; exits 5 on failure.
    Gradcheck {
        /// First seed; overrides HADES_SEED.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of accepted seeds to check.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Model to check; the desk-tiny preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Raw bytes fed to the model as tokens.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeKind {
    /// Output spectrum of every slot of one layer.
    Spectrum(AnalyzeArgs),
    /// Frequency response of every slot's filter matrix.
    Response(AnalyzeArgs),
    /// Effective rank of the stacked response curves.
    Effrank(AnalyzeArgs),
    /// Pairwise linear CKA between slot outputs.
    Cka(AnalyzeArgs),
    /// Token by expert selection matrix.
    Barcode(AnalyzeArgs),
    /// Histogram of the routed step-size shift.
    DeltaHist(AnalyzeArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::InitConfig { preset, out } => commands::init_config(&preset, out.as_deref()),
        Command::Train { config, seed } => commands::train(&config, seed),
        Command::Generate {
            ckpt,
            prompt,
            max_tokens,
            temperature,
            seed,
        } => commands::generate(&ckpt, &prompt, max_tokens, temperature, seed),
        Command::Passkey {
            ckpt,
            paper_grid,
            trials,
            lengths,
            seed,
            out,
        } => commands::passkey(&ckpt, paper_grid, trials, lengths, seed, out.as_deref()),
        Command::Analyze { kind } => commands::analyze(kind),
        Command::Params { config, json } => commands::params(&config, json.as_deref()),
        Command::Flops { config, seqlen, json } => commands::flops(&config, seqlen, json.as_deref()),
        Command::Gradcheck { seed, count, config } => commands::gradcheck(seed, count, config.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
