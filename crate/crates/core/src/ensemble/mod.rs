//! Ensemble fusion and variance-based uncertainty.

mod accumulator;
mod fusion;
mod pipeline;
mod votes;

pub use accumulator::{
    mean_uncertainty, UncertaintyMap, UncertaintyOptions, VarianceAccumulator, VarianceKind,
};
pub use fusion::{fuse_majority, fuse_mean_probability, FusionMode};
pub use pipeline::{
    load_manifest, run_ensemble, run_label_members, run_members, EnsembleOptions, EnsembleOutput,
    PredictionSource, ScanReport, UncertaintyRoute,
};
pub use votes::{onehot_uncertainty, VoteTable};
