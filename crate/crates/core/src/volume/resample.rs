use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ElementKind, Geometry, VoxelGrid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

const EDGE_EPS: f64 = 1e-9;

/// Index of the voxel nearest to continuous index `p`, if it lies in the grid.
#[inline]
pub(crate) fn sample_nearest(dims: [usize; 3], p: [f64; 3]) -> Option<usize> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = (p[a] + 0.5).floor();
        if r < 0.0 || r >= dims[a] as f64 {
            return None;
        }
        idx[a] = r as usize;
    }
    Some(idx[0] + dims[0] * (idx[1] + dims[1] * idx[2]))
}

/// Trilinear sample at continuous index `p`; `None` outside `[0, n-1]` per axis.
#[inline]
pub(crate) fn sample_trilinear(
    dims: [usize; 3],
    p: [f64; 3],
    value: impl Fn(usize) -> f64,
) -> Option<f64> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut w = [0.0f64; 3];
    for a in 0..3 {
        let max = (dims[a] - 1) as f64;
        let x = p[a];
        if x < -EDGE_EPS || x > max + EDGE_EPS {
            return None;
        }
        let x = x.clamp(0.0, max);
        let f = x.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        w[a] = x - f;
    }
    let at = |x: usize, y: usize, z: usize| value(x + dims[0] * (y + dims[1] * z));
    let c00 = at(lo[0], lo[1], lo[2]) * (1.0 - w[0]) + at(hi[0], lo[1], lo[2]) * w[0];
    let c10 = at(lo[0], hi[1], lo[2]) * (1.0 - w[0]) + at(hi[0], hi[1], lo[2]) * w[0];
    let c01 = at(lo[0], lo[1], hi[2]) * (1.0 - w[0]) + at(hi[0], lo[1], hi[2]) * w[0];
    let c11 = at(lo[0], hi[1], hi[2]) * (1.0 - w[0]) + at(hi[0], hi[1], hi[2]) * w[0];
    let c0 = c00 * (1.0 - w[1]) + c10 * w[1];
    let c1 = c01 * (1.0 - w[1]) + c11 * w[1];
    Some(c0 * (1.0 - w[2]) + c1 * w[2])
}

/// Resamples to `target_spacing` (mm).
///
/// Output dims are `round(dims * spacing / target_spacing)` (at least 1).
/// Output voxel centers sit at `(i + 0.5) * ratio - 0.5` in input index
/// space, so both grids share the outer corner of voxel 0 and the affine is
/// updated to keep every voxel center at its world position. Samples beyond
/// the outermost input centers are clamped to the edge.
pub fn resample(
    grid: &VoxelGrid,
    target_spacing: [f64; 3],
    interp: Interpolation,
) -> Result<VoxelGrid> {
    if target_spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    if grid.kind() == ElementKind::LabelId && interp != Interpolation::Nearest {
        return Err(Error::InvalidArgument(
            "label maps can only be resampled with nearest-neighbour interpolation".into(),
        ));
    }
    let src = grid.geometry();
    let mut dims = [0usize; 3];
    let mut ratio = [0.0f64; 3];
    for a in 0..3 {
        dims[a] =
            ((src.dims[a] as f64 * src.spacing[a] / target_spacing[a]).round() as usize).max(1);
        ratio[a] = target_spacing[a] / src.spacing[a];
    }
    let offset = ratio.map(|r| 0.5 * (r - 1.0));

    let mut affine = src.affine;
    for r in 0..3 {
        let translation: f64 = (0..3).map(|c| src.affine[r][c] * offset[c]).sum();
        for c in 0..3 {
            affine[r][c] = src.affine[r][c] * ratio[c];
        }
        affine[r][3] = src.affine[r][3] + translation;
    }
    let geometry = Geometry::with_affine(dims, target_spacing, affine)?;

    let source_point = |i: usize| -> [f64; 3] {
        let [x, y, z] = geometry.coords(i);
        let q = [x as f64, y as f64, z as f64];
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = (q[a] * ratio[a] + offset[a]).clamp(0.0, (src.dims[a] - 1) as f64);
        }
        p
    };

    let n = geometry.num_voxels();
    let data = match interp {
        Interpolation::Nearest => {
            let source: Vec<Option<usize>> = (0..n)
                .into_par_iter()
                .map(|i| sample_nearest(src.dims, source_point(i)))
                .collect();
            grid.data().gather(&source, 0.0)
        }
        Interpolation::Trilinear => {
            let values: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| {
                    sample_trilinear(src.dims, source_point(i), |j| grid.data().get(j))
                        .unwrap_or(0.0)
                })
                .collect();
            grid.data().with_values_like(values)
        }
    };
    VoxelGrid::new(geometry, grid.kind(), data)
}
