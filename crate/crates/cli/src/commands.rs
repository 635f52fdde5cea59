use std::path::{Path, PathBuf};

use ensemble_uq::ensemble::{
    load_manifest, run_ensemble, EnsembleOptions, FusionMode, PredictionSource, UncertaintyRoute,
    VarianceKind,
};
use ensemble_uq::metrics::{
    default_groups, load_label_groups, ClassDsc, CorrectionReport, Denominator, GroupSummary,
};
use ensemble_uq::selection::{
    load_candidates, ranking_table, Budget, CorrelationSummary, RankedScan, SelectionMode,
};
use ensemble_uq::synth::{run_effort_experiment, ExperimentConfig, NoiseSpec, PhantomStructure};
use ensemble_uq::tta::{apply, apply_labels, apply_probabilities, invert, LabelResampling};
use ensemble_uq::volume::{
    read_prediction, read_volume, write_probability_map, Prediction, ProbabilityMap,
};
use ensemble_uq::{
    correction_effort, dsc_per_class, group_summary, Error, FillPolicy, Interpolation, LabelMap,
    Result, SelectionPolicy, TransformSpec, UncertaintyOptions,
};
use log::{info, warn};
use serde::Serialize;

use crate::args::*;
use crate::output::Staged;

pub const FUSED_FILE: &str = "fused.nii.gz";
pub const UNCERTAINTY_FILE: &str = "uncertainty.nii.gz";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const RANKING_FILE: &str = "ranking.json";
pub const EXPERIMENT_FILE: &str = "experiment.json";
pub const EXPERIMENT_CSV: &str = "experiment.csv";

impl From<DenominatorArg> for Denominator {
    fn from(d: DenominatorArg) -> Self {
        match d {
            DenominatorArg::Total => Denominator::Total,
            DenominatorArg::GtForeground => Denominator::GtForeground,
        }
    }
}

impl From<LabelResamplingArg> for LabelResampling {
    fn from(m: LabelResamplingArg) -> Self {
        match m {
            LabelResamplingArg::Nearest => LabelResampling::Nearest,
            LabelResamplingArg::OnehotArgmax => LabelResampling::OneHotArgmax,
        }
    }
}

fn file_stem(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    [".nii.gz", ".nii", ".json"]
        .iter()
        .find_map(|ext| name.strip_suffix(ext))
        .unwrap_or(&name)
        .to_string()
}

pub fn fuse(args: &FuseArgs) -> Result<Vec<PathBuf>> {
    let sources: Vec<PredictionSource> = match &args.manifest {
        Some(manifest) => load_manifest(manifest)?,
        None => args
            .inputs
            .iter()
            .enumerate()
            .map(|(i, path)| PredictionSource {
                member_id: format!("member-{i}"),
                model_tag: String::new(),
                transform: TransformSpec::Identity,
                path: path.clone(),
            })
            .collect(),
    };
    let scan_id =
        args.scan_id
            .clone()
            .unwrap_or_else(|| match (&args.manifest, args.inputs.first()) {
                (Some(m), _) => file_stem(m),
                (None, Some(first)) => file_stem(first),
                (None, None) => "scan".into(),
            });
    let mask = args.mask.as_ref().map(read_volume).transpose()?;
    let options = EnsembleOptions {
        scan_id,
        num_classes: args.num_classes,
        fill: FillPolicy {
            label_fill: args.label_fill,
            ..FillPolicy::default()
        },
        fusion: match args.fusion {
            FusionArg::Majority => FusionMode::Majority,
            FusionArg::MeanProb => FusionMode::MeanProbability,
        },
        label_resampling: args.label_resampling.into(),
        uncertainty: UncertaintyOptions {
            variance: if args.sample_variance {
                VarianceKind::Sample
            } else {
                VarianceKind::Population
            },
            exclude_background: args.exclude_background,
        },
        route: match args.route {
            RouteArg::Auto => UncertaintyRoute::Auto,
            RouteArg::Welford => UncertaintyRoute::Welford,
        },
        mask,
        memory_budget_bytes: args.memory_budget_mb.saturating_mul(1 << 20),
    };
    info!(
        "fusing {} members for scan {}",
        sources.len(),
        options.scan_id
    );
    let mut out = run_ensemble(&sources, &options)?;
    out.report.fused_prediction_path = Some(FUSED_FILE.into());
    info!(
        "scan {}: mean uncertainty {:.6} over {} voxels",
        out.report.scan_id, out.report.mean_uncertainty, out.report.num_voxels
    );

    let mut staged = Staged::new(&args.output_dir)?;
    out.fused.write(staged.path(FUSED_FILE))?;
    ensemble_uq::write_volume(&out.uncertainty.to_grid(), staged.path(UNCERTAINTY_FILE))?;
    staged.json(REPORT_FILE, &out.report)?;
    staged.commit()
}

fn read_labels(path: &Path, num_classes: Option<usize>) -> Result<LabelMap> {
    Ok(match read_prediction(path, num_classes)? {
        Prediction::Labels(l) => l,
        Prediction::Probabilities(p) => ProbabilityMap::from(p).argmax(),
    })
}

#[derive(Debug, Serialize)]
pub struct GroupEntry {
    #[serde(flatten)]
    pub summary: GroupSummary,
    pub table_cell: String,
}

#[derive(Debug, Serialize)]
pub struct MetricsOutput {
    pub scan_id: String,
    pub num_classes: usize,
    pub classes: Vec<ClassDsc>,
    pub groups: Vec<GroupEntry>,
    pub correction: CorrectionReport,
}

pub fn metrics(args: &MetricsArgs) -> Result<Vec<PathBuf>> {
    let mut pred = read_labels(&args.pred, args.num_classes)?;
    let mut gt = read_labels(&args.gt, args.num_classes)?;
    if pred.num_classes() != gt.num_classes() {
        let l = pred.num_classes().max(gt.num_classes());
        pred = LabelMap::new(pred.geometry().clone(), l, pred.into_labels())?;
        gt = LabelMap::new(gt.geometry().clone(), l, gt.into_labels())?;
    }
    let scan_id = args
        .scan_id
        .clone()
        .unwrap_or_else(|| file_stem(&args.pred));
    let mut report = dsc_per_class(&pred, &gt)?;
    report.scan_id = scan_id.clone();
    let groups = match &args.groups {
        Some(path) => load_label_groups(path)?,
        None => default_groups(pred.num_classes()),
    };
    let mut entries = Vec::new();
    for (name, classes) in &groups {
        match group_summary(&report, name, classes) {
            Ok(summary) => entries.push(GroupEntry {
                table_cell: summary.table_cell(),
                summary,
            }),
            Err(Error::EmptyDomain(msg)) => warn!("skipping group: {msg}"),
            Err(e) => return Err(e),
        }
    }
    let mut correction = correction_effort(&pred, &gt, args.denominator.into())?;
    correction.scan_id = scan_id.clone();
    info!(
        "{} differing voxels ({:.4}% of {})",
        correction.differing_voxels, correction.percentage, correction.denominator_voxels
    );

    let mut staged = Staged::new(&args.output_dir)?;
    if args.csv {
        staged.with_writer(METRICS_CSV, |f| report.write_csv(f))?;
    }
    staged.json(
        METRICS_FILE,
        &MetricsOutput {
            scan_id,
            num_classes: pred.num_classes(),
            classes: report.classes,
            groups: entries,
            correction,
        },
    )?;
    staged.commit()
}

#[derive(Debug, Serialize)]
pub struct RankingOutput {
    pub policy: SelectionPolicy,
    /// All candidates in rank order.
    pub scans: Vec<RankedScan>,
    /// Selected scan ids in rank order.
    pub selected: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<CorrelationSummary>,
}

pub fn rank(args: &RankArgs) -> Result<Vec<PathBuf>> {
    let candidates = load_candidates(&args.inputs)?;
    let policy = SelectionPolicy {
        mode: match args.mode {
            ModeArg::Lowest => SelectionMode::Lowest,
            ModeArg::Highest => SelectionMode::Highest,
        },
        budget: match (args.budget, args.cost_cap) {
            (_, Some(cap)) => Budget::CostCap(cap),
            (Some(k), None) => Budget::Count(k),
            (None, None) => Budget::Count(candidates.len().max(1)),
        },
    };
    let scans = ranking_table(&candidates, &policy)?;
    let selected = scans
        .iter()
        .filter(|s| s.selected)
        .map(|s| s.scan_id.clone())
        .collect();

    let paired: Vec<(f64, f64)> = candidates
        .iter()
        .filter_map(|c| c.correction_percentage.map(|p| (c.mean_uncertainty, p)))
        .collect();
    let correlation = if paired.is_empty() {
        None
    } else {
        if paired.len() < candidates.len() {
            warn!(
                "{} of {} candidates lack a correction percentage",
                candidates.len() - paired.len(),
                candidates.len()
            );
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = paired.into_iter().unzip();
        Some(CorrelationSummary::compute(&xs, &ys)?)
    };

    let mut staged = Staged::new(&args.output_dir)?;
    staged.json(
        RANKING_FILE,
        &RankingOutput {
            policy,
            scans,
            selected,
            correlation,
        },
    )?;
    staged.commit()
}

fn experiment_config(args: &SynthArgs) -> Result<ExperimentConfig> {
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return serde_json::from_str(&text)
            .map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())));
    }
    Ok(ExperimentConfig {
        num_scans: args.num_scans,
        dims: [args.size; 3],
        num_classes: args.num_classes,
        structure: match args.structure {
            StructureArg::NestedSpheres => PhantomStructure::NestedSpheres,
            StructureArg::RandomBlobs => PhantomStructure::RandomBlobs,
        },
        noise_grid: NoiseSpec::log_grid(
            args.num_scans,
            args.eps_min,
            args.eps_max,
            args.boundary_flip,
            args.seed,
        ),
        members_per_scan: args.members,
        seed: args.seed,
        denominator: args.denominator.into(),
    })
}

pub fn synth(args: &SynthArgs) -> Result<Vec<PathBuf>> {
    let config = experiment_config(args)?;
    config.validate()?;
    let record = run_effort_experiment(&config)?;
    match (record.summary.spearman, &record.summary.undefined_reason) {
        (Some(rho), _) => info!("spearman {rho:.4} over {} scans", record.summary.n),
        (None, reason) => warn!(
            "correlation undefined: {}",
            reason.as_deref().unwrap_or("unknown")
        ),
    }
    let mut staged = Staged::new(&args.output_dir)?;
    staged.json(EXPERIMENT_FILE, &record)?;
    staged.with_writer(EXPERIMENT_CSV, |f| record.write_csv(f))?;
    staged.commit()
}

fn transform_spec(text: &str) -> Result<TransformSpec> {
    if text.trim_start().starts_with('{') {
        TransformSpec::from_json(text)
    } else {
        TransformSpec::from_json_file(text)
    }
}

pub fn tta(args: &TtaArgs) -> Result<Vec<PathBuf>> {
    let mut spec = transform_spec(&args.spec)?;
    if args.invert {
        spec = invert(&spec);
    }
    let fill = FillPolicy {
        label_fill: args.label_fill,
        intensity_fill: args.intensity_fill,
    };
    let dir = match args.output.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = args
        .output
        .file_name()
        .ok_or_else(|| {
            Error::InvalidArgument(format!("{} is not a file path", args.output.display()))
        })?
        .to_string_lossy()
        .into_owned();
    let mut staged = Staged::new(&dir)?;
    let target = staged.path(&name);

    match read_volume(&args.input) {
        Ok(grid) if grid.kind() == ensemble_uq::ElementKind::LabelId => {
            let labels = LabelMap::from_grid(&grid, args.num_classes)?;
            apply_labels(&spec, &labels, args.label_resampling.into(), &fill)?.write(&target)?;
        }
        Ok(grid) => {
            let interp = match args.interp {
                InterpArg::Nearest => Interpolation::Nearest,
                InterpArg::Trilinear => Interpolation::Trilinear,
            };
            ensemble_uq::write_volume(&apply(&spec, &grid, interp, &fill)?, &target)?;
        }
        Err(Error::UnsupportedFormat(_)) => {
            let Prediction::Probabilities(probs) = read_prediction(&args.input, args.num_classes)?
            else {
                return Err(Error::UnsupportedFormat(format!(
                    "{}: not a 3D or 4D volume",
                    args.input.display()
                )));
            };
            write_probability_map(&apply_probabilities(&spec, &probs, &fill)?, &target)?;
        }
        Err(e) => return Err(e),
    }
    staged.commit()
}
