use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "stm", version, about = "Space-time memory networks for video object segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML file with `seed` and `[train]`, `[inference]`, `[synth]`, `[eval]` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Fixed-order reductions, for bit-reproducible output.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Interval N for the periodic memory policy.
    #[arg(long, global = true, value_name = "N")]
    pub memory_every: Option<usize>,

    #[arg(long, global = true, value_enum)]
    pub memory_policy: Option<PolicyArg>,

    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    First,
    Prev,
    #[value(name = "first+prev")]
    FirstPrev,
    Interval,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train on clips synthesized from still images.
    Pretrain(PretrainArgs),
    /// Main training on videos.
    Train(TrainArgs),
    /// Segment a sequence from its first-frame annotation.
    Infer(InferArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Time inference under each memory policy.
    Bench(BenchArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Write a synthetic moving-shapes dataset.
    SynthGen(SynthGenArgs),
    /// Render memory read weights of one query location as heatmaps.
    VizAttn(VizAttnArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Folder with `images/` and matching `masks/`; synthetic scenes when omitted.
    #[arg(long)]
    pub images: Option<PathBuf>,

    /// Number of synthetic scenes to generate.
    #[arg(long, default_value_t = 500)]
    pub scenes: usize,

    #[arg(long)]
    pub iterations: Option<usize>,

    /// Starting weights.
    #[arg(long)]
    pub init: Option<PathBuf>,

    /// Training checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root in the `JPEGImages`/`Annotations` layout; synthetic videos when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,

    #[arg(long)]
    pub iterations: Option<usize>,

    /// Starting weights, typically the pre-training checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,

    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Model weights; a seeded random initialization when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// Directory of frames, processed in file-name order.
    #[arg(long, conflicts_with = "data", requires = "annotation")]
    pub sequence: Option<PathBuf>,

    /// First-frame annotation (indexed PNG).
    #[arg(long)]
    pub annotation: Option<PathBuf>,

    /// Dataset root; every sequence is segmented.
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Also write a JSON timing report.
    #[arg(long)]
    pub report: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions: `<seq>/<frame>.png` per sequence.
    #[arg(long)]
    pub pred: PathBuf,

    /// Ground truth: a dataset root or an annotation directory.
    #[arg(long)]
    pub gt: PathBuf,

    /// Contour tolerance in pixels.
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// Dataset root; synthetic videos with occlusions when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub sequences: Option<usize>,

    #[arg(long)]
    pub frames: Option<usize>,

    /// Square frame side in pixels.
    #[arg(long)]
    pub size: Option<usize>,

    #[arg(long)]
    pub occlusion: bool,

    #[arg(long)]
    pub drift: bool,
}

#[derive(Debug, Args)]
pub struct VizAttnArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    #[arg(long, requires = "annotation")]
    pub sequence: Option<PathBuf>,

    #[arg(long)]
    pub annotation: Option<PathBuf>,

    /// Query frame index.
    #[arg(long, default_value_t = 5)]
    pub frame: usize,

    /// Query location as `y,x` in image pixels; the object center when omitted.
    #[arg(long, value_parser = parse_pixel)]
    pub pixel: Option<(usize, usize)>,
}

fn parse_pixel(s: &str) -> Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or("expected y,x")?;
    Ok((
        y.trim().parse().map_err(|e| format!("{e}"))?,
        x.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}
