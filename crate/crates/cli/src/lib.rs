//! `longiseg` command-line front end.
//!
//! Every command writes into its own `--out` directory together with a
//! `manifest.json` recording the resolved configuration, so a run can be
//! repeated by passing the manifest back as `--config`.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use longiseg::nets::ModelVariant;
use longiseg::volumes::dataset::SplitName;
use longiseg::volumes::SlicePlane;

pub use error::{CliError, Result, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};

#[derive(Debug, Parser)]
#[command(
    name = "longiseg",
    version,
    about = "Longitudinal MS-lesion segmentation toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic longitudinal dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Score one or more checkpoints on a dataset split and rank them.
    Evaluate(EvaluateArgs),
    /// Segment one subject with a checkpoint.
    Segment(SegmentArgs),
    /// Render loss curves, metric bar charts and slice overlays.
    Plot(PlotArgs),
}

/// Flags shared by every command.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Output directory; every output path is relative to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing run in `--out`.
    #[arg(long)]
    pub force: bool,
    /// Compute device. Only `cpu` is available.
    #[arg(long, env = "LONGISEG_DEVICE", default_value = "cpu")]
    pub device: String,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Generator config (TOML, or a previous generate manifest). Defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_subjects: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training config (TOML, or a previous train manifest).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; overrides the config's `data` entry.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// static, longitudinal, multitask or siamese.
    #[arg(long)]
    pub variant: Option<ModelVariant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Continue from a checkpoint directory written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory, run directory or stub fixture; repeat to compare.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Row label per checkpoint, in order; defaults to the variant name.
    #[arg(long = "label")]
    pub labels: Vec<String>,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    /// Foreground when the fused probability is strictly greater.
    #[arg(long, default_value_t = longiseg::infer::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Expected variant of every model checkpoint.
    #[arg(long)]
    pub variant: Option<ModelVariant>,
    /// Training config whose variant every model checkpoint must match.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint directory, run directory or stub fixture.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory holding the subject.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub subject: String,
    #[arg(long, default_value_t = longiseg::infer::DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training run directory: plots its loss curves.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Evaluation directory: plots its comparison as a bar chart.
    #[arg(long)]
    pub evaluation: Option<PathBuf>,
    /// Predicted mask volume to overlay; needs `--data` and `--subject`.
    #[arg(long)]
    pub prediction: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub subject: Option<String>,
    #[arg(long, default_value = "axial")]
    pub plane: SlicePlane,
    /// Slice index; defaults to the slice with the most reference lesion voxels.
    #[arg(long)]
    pub index: Option<usize>,
}

fn check_device(common: &CommonArgs) -> Result<()> {
    if common.device.eq_ignore_ascii_case("cpu") {
        Ok(())
    } else {
        Err(CliError::config(format!(
            "--device {}: only cpu is supported",
            common.device
        )))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            check_device(&a.common)?;
            commands::generate::cmd_generate(&a)
        }
        Command::Train(a) => {
            check_device(&a.common)?;
            commands::train::cmd_train(&a)
        }
        Command::Evaluate(a) => {
            check_device(&a.common)?;
            commands::evaluate::cmd_evaluate(&a)
        }
        Command::Segment(a) => {
            check_device(&a.common)?;
            commands::segment::cmd_segment(&a)
        }
        Command::Plot(a) => {
            check_device(&a.common)?;
            commands::plot::cmd_plot(&a)
        }
    }
}
