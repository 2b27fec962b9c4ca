//! `clip-rpn`: train, evaluate and run prompt-routed deraining models.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, missing inputs,
//! outputs that exist without `--force`), 2 when a command fails while
//! running.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clip_rpn::vlm::Backend;

#[derive(Debug, Parser)]
#[command(name = "clip-rpn", version, about = "Prompt-routed, mask-guided single-image deraining")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// Dataset directory (`rain/` + `norain/`) or a parent of several.
    #[arg(long, global = true, env = "CLIP_RPN_DATA_ROOT")]
    pub data_root: Option<PathBuf>,
    /// JSON prompt set; defaults to the built-in two-class set.
    #[arg(long, global = true)]
    pub prompts: Option<PathBuf>,
    /// Vision-language backend used for routing.
    #[arg(long, global = true, default_value = "stub", value_parser = parse_backend)]
    pub backend: Backend,
    /// Training config (TOML or JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory to read (or resume from, for `train`).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse().map_err(|e: clip_rpn::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint to `--out`.
    Train {
        /// Override the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Accept a prompt set that differs from the checkpoint's when resuming.
        #[arg(long)]
        allow_prompt_change: bool,
    },
    /// Full-image PSNR/SSIM of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        allow_prompt_change: bool,
    },
    /// Derain one image; writes the result and three mask heatmaps.
    Derain {
        input: PathBuf,
        /// Sub-network to use instead of prompt routing.
        #[arg(long)]
        route: Option<usize>,
        #[arg(long)]
        allow_prompt_change: bool,
    },
    /// Share of images routed to each prompt, per dataset, as CSV.
    AnalyzePrompts,
    /// Side-by-side panels of input, ground-truth mask and predicted masks.
    VizMasks {
        /// Only the first N images.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        allow_prompt_change: bool,
    },
    /// Write a synthetic paired dataset.
    SynthData {
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Loss-gradient profiles over the error range, as CSV.
    LossProfile {
        #[arg(long, default_value_t = 0.8)]
        beta: f64,
        #[arg(long, default_value_t = 2.3)]
        eta: f64,
        /// Training progress fractions at which to sample the exponent.
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        progress: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
}

/// An error detected before any side effect.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
