//! `elnet`: generate synthetic data, train, filter and enhance labels.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigArgs, ConfigError};

#[derive(Parser, Debug)]
#[command(name = "elnet", version, about = "Label enhancement and automatic annotation for binary segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic benchmark data.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Pretrain the backbone by denoising reconstruction.
    Pretrain(PretrainArgs),
    /// Fine-tune the model on the labeled training records of a manifest.
    Finetune(FinetuneArgs),
    /// Label the unlabeled records of a manifest (pipeline in annotate mode).
    Annotate(PipelineArgs),
    /// Replace coarse labels (pipeline in enhance mode).
    Enhance(PipelineArgs),
    /// Score prediction ensembles from saved checkpoints and split a manifest.
    Lqe(LqeArgs),
    /// Accuracy and mIoU between two directories of masks.
    Metrics(MetricsArgs),
    /// Train the reference network and score it against several test label sets.
    Evalprotocol(EvalProtocolArgs),
    /// The iterative pipeline with the mode taken from the configuration.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Run the gradient-check suite; fails if any entry fails.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand, Debug)]
enum SynthCommand {
    /// Write images, exact labels, coarse labels and manifests.
    Gen(SynthGenArgs),
}

#[derive(Subcommand, Debug)]
enum PipelineCommand {
    /// Run every stage.
    Run(PipelineArgs),
}

#[derive(Args, Debug)]
struct SeedArg {
    /// Seed for every random choice; required.
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SynthGenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    /// Number of scenes.
    #[arg(long, default_value_t = 50)]
    n: usize,
    /// Scene side in pixels; a multiple of 16.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Share of scenes in the test split.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Also write `annotate.jsonl`, keeping this share of training labels.
    #[arg(long)]
    labeled_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Manifest whose images are used; labels are ignored.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory that manifest paths are relative to (default: the manifest's).
    #[arg(long)]
    base: Option<PathBuf>,
    /// Backbone checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    /// Standard deviation of the input noise.
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    /// Epoch log (JSON Lines).
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    base: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    /// Backbone checkpoint to start from.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Full checkpoint to continue from, optimizer and shuffling included.
    #[arg(long, conflicts_with = "backbone")]
    resume: Option<PathBuf>,
    /// Epoch log (JSON Lines).
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    base: Option<PathBuf>,
    /// Output directory for manifests, masks, reports and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct LqeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    base: Option<PathBuf>,
    /// One or three full checkpoints; repeat the flag.
    #[arg(long = "checkpoint", required = true, num_args = 1)]
    checkpoints: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of reference masks; every file needs a namesake in `--pred`.
    #[arg(long)]
    gt: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalProtocolArgs {
    /// Manifest with the training labels.
    #[arg(long)]
    train: PathBuf,
    /// Manifest with the exact test labels.
    #[arg(long)]
    test_hq: PathBuf,
    /// Manifest with the original test labels.
    #[arg(long)]
    test_orig: PathBuf,
    /// Manifest with the enhanced test labels.
    #[arg(long)]
    test_enh: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn init_threads() -> Result<(), ConfigError> {
    let Ok(raw) = std::env::var("ELNET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(anyhow::anyhow!("ELNET_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ConfigError(e.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = init_threads().map_err(anyhow::Error::from).and_then(|_| commands::dispatch(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
