use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "ensemble-uq",
    version,
    about = "Fuse segmentation ensembles, measure their uncertainty and rank scans for annotation",
    after_help = "Exit codes: 0 ok, 1 generic failure, 2 missing input, 3 geometry mismatch, \
                  4 invalid spec, 5 invalid transform."
)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "ENSEMBLE_UQ_THREADS")]
    pub threads: Option<usize>,

    /// Log verbosity on standard error.
    #[arg(
        long,
        global = true,
        value_enum,
        default_value = "warn",
        env = "ENSEMBLE_UQ_LOG"
    )]
    pub log: LogLevel,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
}

impl LogLevel {
    pub fn filter(self) -> log::LevelFilter {
        match self {
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse ensemble members and write fused.nii.gz, uncertainty.nii.gz and report.json.
    Fuse(FuseArgs),
    /// Per-class Dice, group summaries and correction effort of a prediction.
    Metrics(MetricsArgs),
    /// Rank scans by mean uncertainty and select a budgeted subset.
    Rank(RankArgs),
    /// Run the synthetic uncertainty vs correction-effort experiment.
    Synth(SynthArgs),
    /// Apply a test-time transform (or its inverse) to a volume.
    Tta(TtaArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Majority,
    MeanProb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DenominatorArg {
    Total,
    GtForeground,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Lowest,
    Highest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelResamplingArg {
    Nearest,
    OnehotArgmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RouteArg {
    Auto,
    Welford,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterpArg {
    Nearest,
    Trilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StructureArg {
    NestedSpheres,
    RandomBlobs,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// JSON list of members: {member_id, model_tag, transform, path}.
    #[arg(
        long,
        env = "ENSEMBLE_UQ_MANIFEST",
        required_unless_present = "inputs",
        conflicts_with = "inputs"
    )]
    pub manifest: Option<PathBuf>,

    /// Member prediction files, all in scan space (no transform).
    #[arg(long, num_args = 1..)]
    pub inputs: Vec<PathBuf>,

    #[arg(long, env = "ENSEMBLE_UQ_OUTPUT_DIR")]
    pub output_dir: PathBuf,

    /// Class count L including background (default: from the inputs).
    #[arg(long, env = "ENSEMBLE_UQ_NUM_CLASSES")]
    pub num_classes: Option<usize>,

    #[arg(
        long,
        value_enum,
        default_value = "majority",
        env = "ENSEMBLE_UQ_FUSION"
    )]
    pub fusion: FusionArg,

    /// Average the variance over foreground labels only.
    #[arg(long, env = "ENSEMBLE_UQ_EXCLUDE_BACKGROUND")]
    pub exclude_background: bool,

    /// Divide by N-1 instead of N.
    #[arg(long)]
    pub sample_variance: bool,

    /// Scan identifier for the report (default: manifest or first input file stem).
    #[arg(long)]
    pub scan_id: Option<String>,

    /// Binary mask restricting the scan mean uncertainty.
    #[arg(long)]
    pub mask: Option<PathBuf>,

    /// How label maps follow affine transforms.
    #[arg(long, value_enum, default_value = "nearest")]
    pub label_resampling: LabelResamplingArg,

    /// Force the streaming variance path even for hard labels.
    #[arg(long, value_enum, default_value = "auto")]
    pub route: RouteArg,

    /// Accumulator memory budget in MiB.
    #[arg(long, default_value_t = 512)]
    pub memory_budget_mb: usize,

    /// Background label used where a transform reaches outside the grid.
    #[arg(long, default_value_t = 0)]
    pub label_fill: u16,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Predicted label map.
    #[arg(long)]
    pub pred: PathBuf,

    /// Reference label map.
    #[arg(long)]
    pub gt: PathBuf,

    /// JSON {group_name: [label ids]} (default: one group of all foreground labels).
    #[arg(long)]
    pub groups: Option<PathBuf>,

    #[arg(long, env = "ENSEMBLE_UQ_OUTPUT_DIR")]
    pub output_dir: PathBuf,

    #[arg(long, env = "ENSEMBLE_UQ_NUM_CLASSES")]
    pub num_classes: Option<usize>,

    #[arg(
        long,
        value_enum,
        default_value = "total",
        env = "ENSEMBLE_UQ_DENOMINATOR"
    )]
    pub denominator: DenominatorArg,

    /// Also write metrics.csv with one row per class.
    #[arg(long)]
    pub csv: bool,

    #[arg(long)]
    pub scan_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Directory of report.json files or a JSON array of candidates.
    #[arg(long)]
    pub inputs: PathBuf,

    #[arg(long, env = "ENSEMBLE_UQ_OUTPUT_DIR")]
    pub output_dir: PathBuf,

    #[arg(long, value_enum, default_value = "lowest", env = "ENSEMBLE_UQ_MODE")]
    pub mode: ModeArg,

    /// Number of scans to select.
    #[arg(long, env = "ENSEMBLE_UQ_BUDGET", conflicts_with = "cost_cap")]
    pub budget: Option<usize>,

    /// Cumulative annotation cost limit (candidates need a cost field).
    #[arg(long)]
    pub cost_cap: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, env = "ENSEMBLE_UQ_OUTPUT_DIR")]
    pub output_dir: PathBuf,

    /// Full experiment configuration as JSON; overrides the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long, default_value_t = 0, env = "ENSEMBLE_UQ_SEED")]
    pub seed: u64,

    #[arg(long, default_value_t = 20)]
    pub num_scans: usize,

    /// Phantom edge length in voxels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,

    #[arg(long, default_value_t = 5, env = "ENSEMBLE_UQ_NUM_CLASSES")]
    pub num_classes: usize,

    /// Ensemble members per scan.
    #[arg(long, default_value_t = 6)]
    pub members: usize,

    /// Smallest global flip probability.
    #[arg(long, default_value_t = 0.01)]
    pub eps_min: f64,

    /// Largest global flip probability.
    #[arg(long, default_value_t = 0.2)]
    pub eps_max: f64,

    /// Boundary flip probability shared by all scans.
    #[arg(long, default_value_t = 0.02)]
    pub boundary_flip: f64,

    #[arg(long, value_enum, default_value = "nested-spheres")]
    pub structure: StructureArg,

    #[arg(
        long,
        value_enum,
        default_value = "total",
        env = "ENSEMBLE_UQ_DENOMINATOR"
    )]
    pub denominator: DenominatorArg,
}

#[derive(Debug, Args)]
pub struct TtaArgs {
    /// Transform as inline JSON or a path to a JSON file.
    #[arg(long)]
    pub spec: String,

    #[arg(long)]
    pub input: PathBuf,

    #[arg(long)]
    pub output: PathBuf,

    /// Apply the inverse transform (map a prediction back).
    #[arg(long)]
    pub invert: bool,

    /// Interpolation for intensity volumes; label maps always use nearest.
    #[arg(long, value_enum, default_value = "trilinear")]
    pub interp: InterpArg,

    #[arg(long, value_enum, default_value = "nearest")]
    pub label_resampling: LabelResamplingArg,

    #[arg(long, env = "ENSEMBLE_UQ_NUM_CLASSES")]
    pub num_classes: Option<usize>,

    #[arg(long, default_value_t = 0)]
    pub label_fill: u16,

    #[arg(long, default_value_t = -1024.0, allow_negative_numbers = true)]
    pub intensity_fill: f64,
}
