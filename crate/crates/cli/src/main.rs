use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "cpmn", version, about = "Weakly supervised temporal action localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with planted segments.
    Synth(SynthArgs),
    /// Train the cascade and pyramid models of every modality.
    Train(TrainArgs),
    /// Run localization and write detection JSON.
    Infer(InferArgs),
    /// Score detections against ground-truth segments.
    Eval(EvalArgs),
    /// Compare inference components and hyperparameter sweeps.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Generator settings as JSON; defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Settings shared by every command that reads a run configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Run configuration JSON; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub nms_threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Save a resumable checkpoint every this many epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many epochs in total, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Trained weights; defaults to the output directory's checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Manifest split to run on: train, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Also write per-class activation CSVs and SVG plots.
    #[arg(long)]
    pub export_cas: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Detection JSON file, or a directory of per-video detection files.
    #[arg(long)]
    pub detections: PathBuf,
    /// Manifest holding the ground-truth annotations.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// IoU threshold preset: thumos, thumos7 or activitynet.
    #[arg(long, default_value = "thumos")]
    pub preset: String,
    /// Directory for report.json and report.txt; defaults to the detections' directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Ablation settings as JSON; defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Trained weights used for the component rows.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Train every configuration from scratch.
    #[arg(long)]
    pub train_inline: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
