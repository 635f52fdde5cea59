use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ElementKind, Geometry, ProbabilityMap, VolumeData, VoxelGrid};

/// Largest population variance of values in `[0, 1]`.
pub const POPULATION_BOUND: f64 = 0.25;

/// Divisor applied to `M2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceKind {
    /// `M2 / N`: the members are the whole population of this ensemble.
    #[default]
    Population,
    /// `M2 / (N - 1)`; a single member yields zero.
    Sample,
}

impl VarianceKind {
    #[inline]
    pub(crate) fn divisor(self, n: u64) -> f64 {
        match self {
            VarianceKind::Population => n as f64,
            VarianceKind::Sample => n.saturating_sub(1).max(1) as f64,
        }
    }
}

/// How per-label variances are reduced to one value per voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UncertaintyOptions {
    pub variance: VarianceKind,
    /// Average over labels `1..L` instead of `0..L`.
    pub exclude_background: bool,
}

impl UncertaintyOptions {
    pub(crate) fn first_class(&self) -> usize {
        self.exclude_background as usize
    }

    pub(crate) fn averaged_classes(&self, num_classes: usize) -> usize {
        num_classes - self.first_class()
    }
}

/// Streaming per-voxel, per-label mean and `M2` over ensemble members.
///
/// State is kept in `f64`, class-plane-major over the z-slices in
/// `z_range`; a full-volume accumulator is the chunk `0..nz`.
#[derive(Debug, Clone)]
pub struct VarianceAccumulator {
    geometry: Geometry,
    num_classes: usize,
    z_range: Range<usize>,
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VarianceAccumulator {
    pub fn new(geometry: Geometry, num_classes: usize) -> Self {
        let nz = geometry.dims[2];
        Self::for_chunk(geometry, num_classes, 0..nz).expect("full z range is valid")
    }

    /// Accumulator covering only the z-slices in `z_range`.
    pub fn for_chunk(
        geometry: Geometry,
        num_classes: usize,
        z_range: Range<usize>,
    ) -> Result<Self> {
        if z_range.start >= z_range.end || z_range.end > geometry.dims[2] {
            return Err(Error::InvalidArgument(format!(
                "z range {z_range:?} outside 0..{}",
                geometry.dims[2]
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let len = z_range.len() * geometry.slice_len() * num_classes;
        Ok(Self {
            geometry,
            num_classes,
            z_range,
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn z_range(&self) -> Range<usize> {
        self.z_range.clone()
    }

    /// Members seen so far.
    pub fn count(&self) -> u64 {
        self.count
    }

    fn chunk_voxels(&self) -> usize {
        self.z_range.len() * self.geometry.slice_len()
    }

    pub fn mean_plane(&self, class: usize) -> &[f64] {
        let n = self.chunk_voxels();
        &self.mean[class * n..(class + 1) * n]
    }

    pub fn m2_plane(&self, class: usize) -> &[f64] {
        let n = self.chunk_voxels();
        &self.m2[class * n..(class + 1) * n]
    }

    /// Welford update with one member over this accumulator's slices.
    pub fn accumulate(&mut self, member: &ProbabilityMap<'_>) -> Result<()> {
        if member.geometry().dims != self.geometry.dims || member.num_classes() != self.num_classes
        {
            return Err(Error::IncompatibleMember(format!(
                "member has dims {:?} and {} classes, accumulator expects {:?} and {}",
                member.geometry().dims,
                member.num_classes(),
                self.geometry.dims,
                self.num_classes
            )));
        }
        self.count += 1;
        let n = self.count as f64;
        let voxels = self.geometry.z_range_voxels(&self.z_range);
        let per_class = self.chunk_voxels();
        self.mean
            .par_chunks_mut(per_class)
            .zip(self.m2.par_chunks_mut(per_class))
            .enumerate()
            .for_each_init(
                || vec![0.0f64; per_class],
                |values, (class, (mean, m2))| {
                    member.fill_plane(class, voxels.clone(), values);
                    for ((m, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(values.iter()) {
                        let delta = x - *m;
                        *m += delta / n;
                        *s += delta * (x - *m);
                    }
                },
            );
        Ok(())
    }

    /// Folds `other` into `self` (pairwise update of Chan et al.).
    pub fn merge(&mut self, other: &VarianceAccumulator) -> Result<()> {
        if other.geometry.dims != self.geometry.dims
            || other.num_classes != self.num_classes
            || other.z_range != self.z_range
        {
            return Err(Error::IncompatibleMember(
                "accumulators cover different grids, classes or slices".into(),
            ));
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            self.count = other.count;
            self.mean.clone_from(&other.mean);
            self.m2.clone_from(&other.m2);
            return Ok(());
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        self.mean
            .par_iter_mut()
            .zip(self.m2.par_iter_mut())
            .zip(other.mean.par_iter().zip(other.m2.par_iter()))
            .for_each(|((ma, sa), (&mb, &sb))| {
                let delta = mb - *ma;
                *ma += delta * nb / n;
                *sa += sb + delta * delta * na * nb / n;
            });
        self.count += other.count;
        Ok(())
    }

    pub fn merged(a: &VarianceAccumulator, b: &VarianceAccumulator) -> Result<VarianceAccumulator> {
        let mut out = a.clone();
        out.merge(b)?;
        Ok(out)
    }

    /// Label-averaged variance for each voxel of this chunk.
    pub fn uncertainty_values(&self, options: &UncertaintyOptions) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let per_class = self.chunk_voxels();
        let divisor = options.variance.divisor(self.count);
        let classes = options.averaged_classes(self.num_classes) as f64;
        let mut out = vec![0.0f64; per_class];
        for class in options.first_class()..self.num_classes {
            for (o, &s) in out.iter_mut().zip(self.m2_plane(class)) {
                *o += s;
            }
        }
        // rounding can leave M2 a hair outside the attainable range
        let upper = match options.variance {
            VarianceKind::Population => POPULATION_BOUND,
            VarianceKind::Sample => f64::INFINITY,
        };
        for o in &mut out {
            *o = (*o / divisor / classes).clamp(0.0, upper);
        }
        Ok(out)
    }

    /// Per-voxel uncertainty map. Requires a full-volume accumulator.
    pub fn voxel_uncertainty(&self, options: &UncertaintyOptions) -> Result<UncertaintyMap> {
        if self.z_range != (0..self.geometry.dims[2]) {
            return Err(Error::InvalidArgument(
                "chunk accumulators yield values, not a full map".into(),
            ));
        }
        let values = self.uncertainty_values(options)?;
        UncertaintyMap::new(self.geometry.clone(), values)
    }
}

/// Per-voxel label-averaged ensemble variance.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    geometry: Geometry,
    values: Vec<f64>,
}

impl UncertaintyMap {
    pub fn new(geometry: Geometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.num_voxels() {
            return Err(Error::InvalidArgument(format!(
                "{} uncertainty values for dims {:?}",
                values.len(),
                geometry.dims
            )));
        }
        Ok(Self { geometry, values })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// float32 grid for writing.
    pub fn to_grid(&self) -> VoxelGrid {
        let data = VolumeData::F32(self.values.iter().map(|&v| v as f32).collect());
        VoxelGrid::new(self.geometry.clone(), ElementKind::Uncertainty, data)
            .expect("length checked on construction")
    }

    pub fn from_grid(grid: &VoxelGrid) -> Result<Self> {
        Self::new(grid.geometry().clone(), grid.data().to_f64())
    }
}

const SUM_BLOCK: usize = 1 << 16;

/// Mean of the map over `mask` (non-zero voxels) or over the whole volume.
///
/// Summation uses fixed-size blocks so the result does not depend on the
/// number of worker threads.
pub fn mean_uncertainty(map: &UncertaintyMap, mask: Option<&VoxelGrid>) -> Result<f64> {
    let values = map.values();
    let (sum, count) = match mask {
        None => {
            let sum = block_sum(values.par_chunks(SUM_BLOCK).map(|b| b.iter().sum::<f64>()));
            (sum, values.len())
        }
        Some(mask) => {
            if mask.geometry().dims != map.geometry().dims {
                return Err(Error::IncompatibleVolumes(format!(
                    "mask dims {:?} vs map dims {:?}",
                    mask.geometry().dims,
                    map.geometry().dims
                )));
            }
            let data = mask.data();
            let blocks: Vec<(f64, usize)> = values
                .par_chunks(SUM_BLOCK)
                .enumerate()
                .map(|(b, block)| {
                    let base = b * SUM_BLOCK;
                    block
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| data.get(base + i) != 0.0)
                        .fold((0.0, 0usize), |(s, c), (_, &v)| (s + v, c + 1))
                })
                .collect();
            let count = blocks.iter().map(|b| b.1).sum();
            (block_sum(blocks.into_par_iter().map(|b| b.0)), count)
        }
    };
    if count == 0 {
        return Err(Error::EmptyDomain("mask selects no voxels".into()));
    }
    Ok(sum / count as f64)
}

fn block_sum(blocks: impl IndexedParallelIterator<Item = f64>) -> f64 {
    let partial: Vec<f64> = blocks.collect();
    partial.iter().sum()
}
