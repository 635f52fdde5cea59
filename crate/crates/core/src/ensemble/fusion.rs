use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::votes::{check_members, tally};
use crate::error::{Error, Result};
use crate::volume::{DenseProbabilities, Label, LabelMap, ProbabilityMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Per-voxel majority vote over (argmaxed) member labels.
    #[default]
    Majority,
    /// Argmax of the member-averaged probabilities.
    MeanProbability,
}

const VOXEL_BLOCK: usize = 4096;

/// Per-voxel majority vote; ties go to the lowest label index.
pub fn fuse_majority(members: &[LabelMap]) -> Result<LabelMap> {
    let first = check_members(members)?;
    if members.len() == 1 {
        return Ok(first.clone());
    }
    let mut labels = vec![0 as Label; first.num_voxels()];
    labels
        .par_chunks_mut(VOXEL_BLOCK)
        .enumerate()
        .for_each_init(
            || Vec::with_capacity(members.len()),
            |scratch, (b, out)| {
                let base = b * VOXEL_BLOCK;
                for (i, o) in out.iter_mut().enumerate() {
                    scratch.clear();
                    scratch.extend(members.iter().map(|m| m.labels()[base + i]));
                    *o = tally(scratch, 0).0;
                }
            },
        );
    LabelMap::new(first.geometry().clone(), first.num_classes(), labels)
}

/// Averages member probabilities and takes the per-voxel argmax (ties to the
/// lowest index).
///
/// Each voxel-class mean is summed in sorted order so the result does not
/// depend on member order.
pub fn fuse_mean_probability(
    members: &[ProbabilityMap<'_>],
) -> Result<(LabelMap, DenseProbabilities)> {
    let first = members.first().ok_or(Error::EmptyEnsemble)?;
    for (i, m) in members.iter().enumerate().skip(1) {
        if !m.geometry().matches(first.geometry()) || m.num_classes() != first.num_classes() {
            return Err(Error::IncompatibleMember(format!(
                "member {i} has dims {:?} and {} classes, member 0 has {:?} and {}",
                m.geometry().dims,
                m.num_classes(),
                first.geometry().dims,
                first.num_classes()
            )));
        }
    }
    let geometry = first.geometry().clone();
    let l = first.num_classes();
    let v = geometry.num_voxels();
    let n = members.len() as f64;

    let mut planes = vec![0.0f32; v * l];
    let mut labels = vec![0 as Label; v];
    let blocks: Vec<(usize, Vec<f32>, Vec<Label>)> = (0..v.div_ceil(VOXEL_BLOCK))
        .into_par_iter()
        .map(|b| {
            let start = b * VOXEL_BLOCK;
            let end = (start + VOXEL_BLOCK).min(v);
            let len = end - start;
            let mut means = vec![0.0f32; len * l];
            let mut best = vec![(f64::NEG_INFINITY, 0 as Label); len];
            let mut scratch = Vec::with_capacity(members.len());
            for c in 0..l {
                for i in 0..len {
                    scratch.clear();
                    scratch.extend(members.iter().map(|m| m.value(start + i, c)));
                    scratch.sort_unstable_by(f32::total_cmp);
                    let mean = scratch.iter().map(|&p| p as f64).sum::<f64>() / n;
                    means[c * len + i] = mean as f32;
                    if mean > best[i].0 {
                        best[i] = (mean, c as Label);
                    }
                }
            }
            (start, means, best.into_iter().map(|b| b.1).collect())
        })
        .collect();
    for (start, means, block_labels) in blocks {
        let len = block_labels.len();
        for c in 0..l {
            planes[c * v + start..c * v + start + len]
                .copy_from_slice(&means[c * len..(c + 1) * len]);
        }
        labels[start..start + len].copy_from_slice(&block_labels);
    }
    let fused = LabelMap::new(geometry.clone(), l, labels)?;
    let mean = DenseProbabilities::new(geometry, l, planes)?;
    Ok((fused, mean))
}
