use std::collections::HashSet;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::accumulator::{
    mean_uncertainty, UncertaintyMap, UncertaintyOptions, VarianceAccumulator,
};
use super::fusion::{fuse_majority, fuse_mean_probability, FusionMode};
use super::votes::{tally, VoteScale};
use crate::error::{Error, Result};
use crate::tta::{
    apply_labels, apply_probabilities, invert, FillPolicy, LabelResampling, TransformSpec,
};
use crate::volume::{read_prediction, Label, LabelMap, Prediction, ProbabilityMap, VoxelGrid};

/// One ensemble member: a prediction file plus the test-time transform that
/// was applied to the input before inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSource {
    pub member_id: String,
    #[serde(default)]
    pub model_tag: String,
    #[serde(default)]
    pub transform: TransformSpec,
    pub path: PathBuf,
}

/// Reads a JSON list of [`PredictionSource`]s. Relative paths are resolved
/// against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<PredictionSource>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut sources: Vec<PredictionSource> = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for s in &mut sources {
        if s.path.is_relative() {
            s.path = base.join(&s.path);
        }
    }
    validate_sources(&sources)?;
    Ok(sources)
}

fn validate_sources(sources: &[PredictionSource]) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let mut seen = HashSet::new();
    for s in sources {
        if !seen.insert(s.member_id.as_str()) {
            return Err(Error::InvalidSpec(format!(
                "duplicate member_id {:?}",
                s.member_id
            )));
        }
        s.transform.validate()?;
    }
    Ok(())
}

/// Which uncertainty computation to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyRoute {
    /// Vote counts when every member is a hard label map, Welford otherwise.
    #[default]
    Auto,
    /// Always stream members through a [`VarianceAccumulator`].
    Welford,
}

#[derive(Debug, Clone)]
pub struct EnsembleOptions {
    pub scan_id: String,
    /// Class count; inferred from the members when `None`.
    pub num_classes: Option<usize>,
    pub fill: FillPolicy,
    pub fusion: FusionMode,
    pub label_resampling: LabelResampling,
    pub uncertainty: UncertaintyOptions,
    pub route: UncertaintyRoute,
    /// Restricts the scan mean to non-zero voxels.
    pub mask: Option<VoxelGrid>,
    /// Upper bound for accumulator state held at once.
    pub memory_budget_bytes: usize,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            scan_id: String::from("scan"),
            num_classes: None,
            fill: FillPolicy::default(),
            fusion: FusionMode::default(),
            label_resampling: LabelResampling::default(),
            uncertainty: UncertaintyOptions::default(),
            route: UncertaintyRoute::default(),
            mask: None,
            memory_budget_bytes: 512 << 20,
        }
    }
}

/// Per-scan summary written next to the fused outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub scan_id: String,
    pub ensemble_size: usize,
    pub mean_uncertainty: f64,
    pub num_voxels: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused_prediction_path: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EnsembleOutput {
    pub fused: LabelMap,
    pub uncertainty: UncertaintyMap,
    pub report: ScanReport,
}

/// Loads every member, maps it back through the inverse of its transform,
/// fuses the members and computes the uncertainty map and scan mean.
///
/// Any unreadable or mismatched member fails the whole run.
pub fn run_ensemble(
    sources: &[PredictionSource],
    options: &EnsembleOptions,
) -> Result<EnsembleOutput> {
    validate_sources(sources)?;
    let members = load_members(sources, options)?;
    run_members(members, options)
}

/// Same as [`run_ensemble`] for members already loaded and in scan space.
pub fn run_members(members: Vec<Prediction>, options: &EnsembleOptions) -> Result<EnsembleOutput> {
    let first = members.first().ok_or(Error::EmptyEnsemble)?;
    let geometry = first.geometry().clone();
    let num_classes = first.num_classes();
    let ensemble_size = members.len();
    for (i, m) in members.iter().enumerate() {
        if !m.geometry().matches(&geometry) {
            return Err(Error::IncompatibleMember(format!(
                "member {i} has dims {:?}, member 0 has {:?}",
                m.geometry().dims,
                geometry.dims
            )));
        }
        if m.num_classes() != num_classes {
            return Err(Error::IncompatibleMember(format!(
                "member {i} has {} classes, member 0 has {num_classes}",
                m.num_classes()
            )));
        }
    }

    let all_labels = members.iter().all(|m| matches!(m, Prediction::Labels(_)));
    let (fused, uncertainty) = if all_labels && options.route == UncertaintyRoute::Auto {
        let labels: Vec<LabelMap> = members
            .into_iter()
            .map(|m| match m {
                Prediction::Labels(l) => l,
                Prediction::Probabilities(_) => unreachable!(),
            })
            .collect();
        // averaged one-hot votes peak at the majority label, so both fusion
        // modes agree here
        vote_route(&labels, &options.uncertainty)?
    } else {
        let maps: Vec<ProbabilityMap<'static>> = members
            .into_iter()
            .map(|m| match m {
                Prediction::Labels(l) => ProbabilityMap::from(l),
                Prediction::Probabilities(p) => ProbabilityMap::from(p),
            })
            .collect();
        let uncertainty = welford_route(&maps, num_classes, options)?;
        let fused = match options.fusion {
            FusionMode::Majority => {
                let hard: Vec<LabelMap> = maps.par_iter().map(|m| m.argmax()).collect();
                fuse_majority(&hard)?
            }
            FusionMode::MeanProbability => fuse_mean_probability(&maps)?.0,
        };
        (fused, uncertainty)
    };

    let mean = mean_uncertainty(&uncertainty, options.mask.as_ref())?;
    info!(
        "{}: {ensemble_size} members, mean uncertainty {mean:.6e}",
        options.scan_id
    );
    let report = ScanReport {
        scan_id: options.scan_id.clone(),
        ensemble_size,
        mean_uncertainty: mean,
        num_voxels: geometry.num_voxels(),
        num_classes,
        fused_prediction_path: None,
    };
    Ok(EnsembleOutput {
        fused,
        uncertainty,
        report,
    })
}

fn load_members(
    sources: &[PredictionSource],
    options: &EnsembleOptions,
) -> Result<Vec<Prediction>> {
    let raw: Vec<Prediction> = sources
        .par_iter()
        .map(|s| {
            debug!("reading member {} from {}", s.member_id, s.path.display());
            read_prediction(&s.path, options.num_classes)
        })
        .collect::<Result<_>>()?;
    let num_classes = match options.num_classes {
        Some(l) => l,
        None => raw.iter().map(Prediction::num_classes).max().unwrap_or(2),
    };
    raw.into_par_iter()
        .zip(sources.par_iter())
        .map(|(member, source)| {
            let member = match member {
                Prediction::Labels(l) if l.num_classes() != num_classes => {
                    let geometry = l.geometry().clone();
                    Prediction::Labels(LabelMap::new(geometry, num_classes, l.into_labels())?)
                }
                other => other,
            };
            if source.transform.is_identity() {
                return Ok(member);
            }
            let back = invert(&source.transform);
            Ok(match member {
                Prediction::Labels(l) => Prediction::Labels(apply_labels(
                    &back,
                    &l,
                    options.label_resampling,
                    &options.fill,
                )?),
                Prediction::Probabilities(p) => {
                    Prediction::Probabilities(apply_probabilities(&back, &p, &options.fill)?)
                }
            })
        })
        .collect()
}

/// Majority labels and closed-form uncertainty straight from the member
/// labels, one voxel at a time.
fn vote_route(
    members: &[LabelMap],
    options: &UncertaintyOptions,
) -> Result<(LabelMap, UncertaintyMap)> {
    let first = &members[0];
    let v = first.num_voxels();
    let scale = VoteScale::new(members.len() as u64, first.num_classes(), options);
    let first_class = options.first_class();
    let mut labels = vec![0 as Label; v];
    let mut values = vec![0.0f64; v];
    const BLOCK: usize = 4096;
    labels
        .par_chunks_mut(BLOCK)
        .zip(values.par_chunks_mut(BLOCK))
        .enumerate()
        .for_each_init(
            || Vec::with_capacity(members.len()),
            |scratch, (b, (lab, val))| {
                let base = b * BLOCK;
                for i in 0..lab.len() {
                    scratch.clear();
                    scratch.extend(members.iter().map(|m| m.labels()[base + i]));
                    let (mode, spread) = tally(scratch, first_class);
                    lab[i] = mode;
                    val[i] = scale.apply(spread);
                }
            },
        );
    Ok((
        LabelMap::new(first.geometry().clone(), first.num_classes(), labels)?,
        UncertaintyMap::new(first.geometry().clone(), values)?,
    ))
}

/// Streams the members through z-chunked accumulators sized to the memory
/// budget.
fn welford_route(
    maps: &[ProbabilityMap<'_>],
    num_classes: usize,
    options: &EnsembleOptions,
) -> Result<UncertaintyMap> {
    let geometry = maps[0].geometry().clone();
    let nz = geometry.dims[2];
    let bytes_per_slice = geometry.slice_len() * num_classes * 2 * std::mem::size_of::<f64>();
    let slices = (options.memory_budget_bytes / bytes_per_slice.max(1)).clamp(1, nz);
    debug!("welford accumulation in chunks of {slices} slices");
    let mut values = Vec::with_capacity(geometry.num_voxels());
    let mut z = 0;
    while z < nz {
        let end = (z + slices).min(nz);
        let mut acc = VarianceAccumulator::for_chunk(geometry.clone(), num_classes, z..end)?;
        for m in maps {
            acc.accumulate(m)?;
        }
        values.extend(acc.uncertainty_values(&options.uncertainty)?);
        z = end;
    }
    UncertaintyMap::new(geometry, values)
}

/// Convenience for callers holding label maps in memory.
pub fn run_label_members(
    members: Vec<LabelMap>,
    options: &EnsembleOptions,
) -> Result<EnsembleOutput> {
    run_members(
        members.into_iter().map(Prediction::Labels).collect(),
        options,
    )
}
