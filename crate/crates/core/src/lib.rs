//! Ensemble fusion and variance-based uncertainty for volumetric segmentations.
//!
//! Member predictions (hard label maps or class-probability planes) are mapped
//! back through their test-time transforms, fused, and summarized by the
//! per-voxel variance of class probabilities averaged over labels. The crate
//! also covers Dice-based evaluation, correction effort, scan ranking and a
//! synthetic harness.

pub mod ensemble;
pub mod error;
mod linalg;
pub mod metrics;
pub mod selection;
pub mod synth;
pub mod tta;
pub mod volume;

pub use ensemble::{
    fuse_majority, fuse_mean_probability, mean_uncertainty, onehot_uncertainty, run_ensemble,
    EnsembleOptions, FusionMode, PredictionSource, ScanReport, UncertaintyMap, UncertaintyOptions,
    VarianceAccumulator,
};
pub use error::{Error, Result};
pub use metrics::{
    correction_effort, dsc_per_class, group_summary, percentile, CorrectionReport, DscReport,
    GroupSummary,
};
pub use selection::{pearson, rank, select, spearman, CandidateScan, SelectionPolicy};
pub use tta::{FillPolicy, TransformSpec};
pub use volume::{
    onehot_view, read_volume, resample, write_volume, DenseProbabilities, ElementKind, Geometry,
    Interpolation, Label, LabelMap, ProbabilityMap, VoxelGrid,
};
