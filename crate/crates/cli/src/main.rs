use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Masked-modeling + contrastive audio-language pre-training pipeline.
///
/// Exit codes: 0 success, 1 runtime or configuration error, 2 usage error.
#[derive(Parser, Debug)]
#[command(name = "m2dclap", version)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat key = value config file applied over the built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Overrides the `seed` config key.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Output root (default: $M2DC_OUT, else ./runs).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Config override, applied after the file; repeatable, last wins.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Dataset directory (default: <out>/data).
    #[arg(long, global = true, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Inputs {
    /// Model checkpoint to start from or evaluate.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SynthArgs {
    /// Overrides `data.classes`.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Overrides `data.per_class`.
    #[arg(long = "per-class")]
    pub per_class: Option<usize>,
    /// Overrides `data.heldout_per_class`.
    #[arg(long = "heldout-per-class")]
    pub heldout_per_class: Option<usize>,
    /// Clip length in seconds; overrides `data.duration_s`.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Joint masked-prediction and contrastive pre-training.
    PretrainStage1,
    /// Supervised fine-tuning of the stage-1 audio encoder.
    #[command(name = "finetune-stage1.1")]
    FinetuneStage1_1(Inputs),
    /// Contrastive text-encoder training against the frozen audio encoder.
    PretrainStage2(Inputs),
    /// Contrastive refinement without masking.
    #[command(name = "refine-stage2.1")]
    RefineStage2_1(Inputs),
    /// Clip features of the train and held-out splits.
    ExtractFeatures(Inputs),
    /// Linear probe on extracted features.
    EvalLinear {
        /// Directory holding train.m2df and heldout.m2df (default: <out>/extract-features).
        #[arg(long, value_name = "DIR")]
        features: Option<PathBuf>,
    },
    /// Zero-shot classification of the held-out split.
    EvalZeroshot(Inputs),
    /// Audio-text retrieval on the held-out split.
    EvalRetrieval(Inputs),
    /// Projector attention maps as PGM images.
    ExportAttention(Inputs),
    /// Writes the synthetic corpus: manifests, WAVs and the embedding cache.
    SynthData(SynthArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli.common, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
