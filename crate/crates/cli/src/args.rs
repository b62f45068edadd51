use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand};
use plumeseg_core::data::{PlumeProfile, Split};
use plumeseg_core::loss::LossKind;
use plumeseg_core::metrics::Connectivity;
use plumeseg_core::model::BlockOrder;

#[derive(Debug, Parser)]
#[command(
    name = "plumeseg",
    version,
    about = "Methane plume segmentation for Sentinel-2 patches"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with manifest and normalization stats
    Synth(SynthArgs),
    /// Append the NDMI band to a 12-band patch
    Ndmi(NdmiArgs),
    /// Multi-band multi-pass retrieval baseline
    Mbmp(MbmpArgs),
    /// Train the segmentation network
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split
    Eval(EvalArgs),
    /// Segment a single patch
    Predict(PredictArgs),
    /// Grad-CAM heatmap of one network block for a single patch
    Gradcam(GradcamArgs),
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    /// Probability above which a pixel counts as plume
    #[arg(long)]
    pub threshold: Option<f64>,
    /// A scene is positive when its largest region exceeds this many pixels
    #[arg(long)]
    pub min_region: Option<usize>,
    /// Pixel connectivity for regions (4 or 8)
    #[arg(long)]
    pub connectivity: Option<Connectivity>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON config file; flags override its fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "corpus")]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Peak fractional B12 absorption
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub negative_fraction: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Put every scene in the training split
    #[arg(long)]
    pub all_train: bool,
    /// Square scene extent in pixels
    #[arg(long)]
    pub size: Option<usize>,
    /// Per-pixel noise std in reflectance units
    #[arg(long)]
    pub noise: Option<f64>,
    /// Amplitude of the shared albedo field
    #[arg(long)]
    pub terrain: Option<f64>,
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    /// gaussian or top-hat
    #[arg(long)]
    pub profile: Option<PlumeProfile>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct NdmiArgs {
    /// 12-band patch header (.json)
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output header path [default: <input stem>.ndmi.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["plume", "data"])))]
pub struct MbmpArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Patch of the pass under test
    #[arg(long, requires = "reference", conflicts_with = "data")]
    pub plume: Option<PathBuf>,
    /// Plume-free pass of the same footprint
    #[arg(long, requires = "plume")]
    pub reference: Option<PathBuf>,
    /// Corpus directory; every entry with a reference pass is processed
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Restrict corpus mode to one split
    #[arg(long, requires = "data")]
    pub split: Option<Split>,
    /// Retrieval threshold; must be negative
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub min_region: Option<usize>,
    #[arg(long)]
    pub connectivity: Option<Connectivity>,
    #[arg(long, default_value = "mbmp")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "corpus")]
    pub data: PathBuf,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// focal, bce or weighted_bce
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub pos_weight: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub base_filters: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// conv-relu-bn or conv-bn-relu
    #[arg(long)]
    pub block_order: Option<BlockOrder>,
    /// Train on the 12 spectral bands only
    #[arg(long)]
    pub no_ndmi: bool,
    /// Negatives drawn per positive each epoch
    #[arg(long)]
    pub neg_ratio: Option<usize>,
    #[arg(long)]
    pub val_split: Option<Split>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long)]
    pub factor: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Disable rotation and noise augmentation
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "run/best.ckpt.json")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "corpus")]
    pub data: PathBuf,
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Patch header (.json), 12 or 13 bands
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = "predictions")]
    pub out: PathBuf,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Block name: enc0.., bottleneck, dec..
    #[arg(long, default_value = "dec0")]
    pub layer: String,
    #[arg(long, default_value = "gradcam")]
    pub out: PathBuf,
}
