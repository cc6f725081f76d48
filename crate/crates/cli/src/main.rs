//! `pgrnet`: batch driver for prior extraction, guidance rendering,
//! synthetic data, training, inference and evaluation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Marks an error caused by the caller's input rather than by the run.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

#[derive(Parser)]
#[command(name = "pgrnet", version, about = "Prior-guided ROI segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine ROI prior templates from a directory of PGM masks.
    ExtractPriors(ExtractPriorsArgs),
    /// Render guidance maps for a prior file as 8-bit PGMs.
    GenGuidance(GenGuidanceArgs),
    /// Write a synthetic lesion dataset.
    GenSynth(GenSynthArgs),
    /// Train a network and write its checkpoint.
    Train(TrainArgs),
    /// Segment one image or every case of a dataset directory.
    Infer(InferArgs),
    /// Score predicted masks against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
pub struct ExtractPriorsArgs {
    /// Directory of PGM masks, or a dataset directory with a `masks/` folder.
    #[arg(long)]
    pub masks: PathBuf,
    /// Output prior JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Components smaller than this side length are discarded.
    #[arg(long, default_value_t = 10)]
    pub s_min: usize,
    /// Smallest side length entering the size distribution.
    #[arg(long, default_value_t = 20)]
    pub s_valid: usize,
    /// Minimum distance between accepted size peaks.
    #[arg(long, default_value_t = 5)]
    pub d_min: usize,
    /// Linking radius for centre clustering, in pixels.
    #[arg(long, default_value_t = 30.0)]
    pub radius: f64,
    /// Maximum number of priors kept.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Mask labels counted as lesion.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub labels: Vec<u8>,
}

#[derive(Args)]
pub struct GenGuidanceArgs {
    /// Prior JSON.
    #[arg(long)]
    pub priors: PathBuf,
    /// Side length of the square layer grid.
    #[arg(long)]
    pub layer_size: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Gaussian σ as a fraction of the ROI radius.
    #[arg(long, default_value_t = 0.5)]
    pub sigma_ratio: f64,
    /// Fringe decay τ as a fraction of the ROI radius.
    #[arg(long, default_value_t = 0.25)]
    pub tau_ratio: f64,
    /// Modulation strength for `--image`.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Optional `layer_size`-square PGM to modulate with the aggregated map.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub cases: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Unlabelled lesion-like blobs per image.
    #[arg(long, default_value_t = 1)]
    pub distractors: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory with `images/` and `masks/`.
    #[arg(long)]
    pub data: PathBuf,
    /// Prior JSON.
    #[arg(long)]
    pub priors: PathBuf,
    /// Settings file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path. `<out>.json` and `<out>.csv` are written alongside.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides one setting, e.g. `--set lr=0.003`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args)]
pub struct InferArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A PGM per modality, or one dataset directory.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Mask file, or a directory when the input is a dataset.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the decision record as `<mask>.decision.json`.
    #[arg(long)]
    pub emit_decision: bool,
    /// Inference path: gate, candidate or fallback. Defaults to the
    /// checkpoint's evaluation mode.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks, or a dataset directory.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `wt`, or `all` for WT, TC and ET. Defaults to `all` when any ground
    /// truth carries labels beyond 0 and 1.
    #[arg(long)]
    pub regions: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::ExtractPriors(a) => commands::extract_priors(a),
        Command::GenGuidance(a) => commands::gen_guidance(a),
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<InputError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
