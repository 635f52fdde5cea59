//! Canonical in-memory volume types plus NIfTI-1 I/O and resampling.
//!
//! Voxel data is stored x-fastest (`index = x + nx * (y + ny * z)`), which is
//! the NIfTI on-disk order, so a contiguous range of z-slices is a contiguous
//! range of the data buffer.

mod nifti;
mod resample;

use std::borrow::Cow;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::det3;

pub use nifti::{
    read_prediction, read_probability_map, read_volume, write_probability_map, write_volume,
    Prediction,
};
pub use resample::{resample, Interpolation};
pub(crate) use resample::{sample_nearest, sample_trilinear};

/// Label ids are stored as `u16`; label maps support up to 65536 classes.
pub type Label = u16;

/// Largest class count a [`LabelMap`] can hold.
pub const MAX_CLASSES: usize = Label::MAX as usize + 1;

/// Tolerance on probability range and per-voxel normalization.
pub const PROBABILITY_TOLERANCE: f64 = 1e-4;

/// Row-major 4×4 voxel-to-world matrix.
pub type Affine = [[f64; 4]; 4];

/// Grid shape, voxel spacing (mm) and voxel-to-world affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl Geometry {
    /// Axis-aligned geometry whose affine is `diag(spacing)`.
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let mut affine = [[0.0; 4]; 4];
        for (a, s) in spacing.iter().enumerate() {
            affine[a][a] = *s;
        }
        affine[3][3] = 1.0;
        Self::with_affine(dims, spacing, affine)
    }

    pub fn with_affine(dims: [usize; 3], spacing: [f64; 3], affine: Affine) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "dimensions must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        let linear = [
            [affine[0][0], affine[0][1], affine[0][2]],
            [affine[1][0], affine[1][1], affine[1][2]],
            [affine[2][0], affine[2][1], affine[2][2]],
        ];
        let det = det3(&linear);
        if !(det.abs() > 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "affine is singular (det = {det:e})"
            )));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| {
                Error::InvalidArgument(format!("voxel count overflows for dims {dims:?}"))
            })?;
        Ok(Self {
            dims,
            spacing,
            affine,
        })
    }

    /// Voxel count `V`.
    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Voxel index range covered by the z-slices in `z`.
    pub fn z_range_voxels(&self, z: &Range<usize>) -> Range<usize> {
        z.start * self.slice_len()..z.end * self.slice_len()
    }

    /// Same dims; spacing and affine equal up to float32 header precision.
    pub fn matches(&self, other: &Geometry) -> bool {
        const TOL: f64 = 1e-4;
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(&other.spacing)
                .all(|(a, b)| (a - b).abs() <= TOL * a.abs().max(1.0))
            && self
                .affine
                .iter()
                .flatten()
                .zip(other.affine.iter().flatten())
                .all(|(a, b)| (a - b).abs() <= TOL * a.abs().max(1.0))
    }

    pub(crate) fn ensure_matches(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else if self.dims != other.dims {
            Err(Error::IncompatibleVolumes(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )))
        } else {
            Err(Error::IncompatibleVolumes(format!(
                "{what}: spacing or affine differ"
            )))
        }
    }
}

/// What the scalars of a grid represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElementKind {
    IntensityHu,
    LabelId,
    Probability,
    Uncertainty,
}

impl ElementKind {
    pub(crate) fn tag(self) -> &'static str {
        match self {
            ElementKind::IntensityHu => "intensity",
            ElementKind::LabelId => "label",
            ElementKind::Probability => "probability",
            ElementKind::Uncertainty => "uncertainty",
        }
    }

    pub(crate) fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "intensity" => Some(ElementKind::IntensityHu),
            "label" => Some(ElementKind::LabelId),
            "probability" => Some(ElementKind::Probability),
            "uncertainty" => Some(ElementKind::Uncertainty),
            _ => None,
        }
    }
}

/// Typed voxel storage for the NIfTI datatypes this crate handles.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
    F32(Vec<f32>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::U8(v) => v.len(),
            VolumeData::I16(v) => v.len(),
            VolumeData::I32(v) => v.len(),
            VolumeData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, index: usize) -> f64 {
        match self {
            VolumeData::U8(v) => v[index] as f64,
            VolumeData::I16(v) => v[index] as f64,
            VolumeData::I32(v) => v[index] as f64,
            VolumeData::F32(v) => v[index] as f64,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// Rebuilds the same variant from `f64` samples, rounding for integer types.
    pub(crate) fn with_values_like(&self, values: Vec<f64>) -> VolumeData {
        match self {
            VolumeData::U8(_) => VolumeData::U8(
                values
                    .iter()
                    .map(|v| v.round().clamp(0.0, 255.0) as u8)
                    .collect(),
            ),
            VolumeData::I16(_) => VolumeData::I16(
                values
                    .iter()
                    .map(|v| v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16)
                    .collect(),
            ),
            VolumeData::I32(_) => VolumeData::I32(
                values
                    .iter()
                    .map(|v| v.round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                    .collect(),
            ),
            VolumeData::F32(_) => VolumeData::F32(values.iter().map(|&v| v as f32).collect()),
        }
    }

    /// Gathers `out[i] = self[source[i]]`, or `fill` where the source is `None`.
    pub(crate) fn gather(&self, source: &[Option<usize>], fill: f64) -> VolumeData {
        fn pick<T: Copy>(v: &[T], source: &[Option<usize>], fill: T) -> Vec<T> {
            source.iter().map(|s| s.map_or(fill, |i| v[i])).collect()
        }
        let int_fill = fill.round();
        match self {
            VolumeData::U8(v) => VolumeData::U8(pick(v, source, int_fill.clamp(0.0, 255.0) as u8)),
            VolumeData::I16(v) => VolumeData::I16(pick(
                v,
                source,
                int_fill.clamp(i16::MIN as f64, i16::MAX as f64) as i16,
            )),
            VolumeData::I32(v) => VolumeData::I32(pick(
                v,
                source,
                int_fill.clamp(i32::MIN as f64, i32::MAX as f64) as i32,
            )),
            VolumeData::F32(v) => VolumeData::F32(pick(v, source, fill as f32)),
        }
    }
}

/// Dense 3D raster with geometry and an element kind.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    geometry: Geometry,
    kind: ElementKind,
    data: VolumeData,
}

impl VoxelGrid {
    pub fn new(geometry: Geometry, kind: ElementKind, data: VolumeData) -> Result<Self> {
        if data.len() != geometry.num_voxels() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(Self {
            geometry,
            kind,
            data,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn kind(&self) -> ElementKind {
        self.kind
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    pub fn into_data(self) -> VolumeData {
        self.data
    }

    pub fn num_voxels(&self) -> usize {
        self.geometry.num_voxels()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data.get(self.geometry.index(x, y, z))
    }
}

/// Integer label volume with `num_classes` classes; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    geometry: Geometry,
    num_classes: usize,
    labels: Vec<Label>,
}

impl LabelMap {
    pub fn new(geometry: Geometry, num_classes: usize, labels: Vec<Label>) -> Result<Self> {
        if !(2..=MAX_CLASSES).contains(&num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label maps need 2..={MAX_CLASSES} classes, got {num_classes}"
            )));
        }
        if labels.len() != geometry.num_voxels() {
            return Err(Error::InvalidArgument(format!(
                "label count {} does not match dims {:?}",
                labels.len(),
                geometry.dims
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            geometry,
            num_classes,
            labels,
        })
    }

    /// All-background map.
    pub fn zeros(geometry: Geometry, num_classes: usize) -> Result<Self> {
        let n = geometry.num_voxels();
        Self::new(geometry, num_classes, vec![0; n])
    }

    /// Interprets an integer-valued grid as labels. With `num_classes = None`
    /// the class count is the largest label plus one (at least 2).
    pub fn from_grid(grid: &VoxelGrid, num_classes: Option<usize>) -> Result<Self> {
        let data = grid.data();
        let mut labels = Vec::with_capacity(data.len());
        let mut max = 0usize;
        for i in 0..data.len() {
            let v = data.get(i);
            if v < 0.0 || v.fract() != 0.0 || v >= MAX_CLASSES as f64 {
                return Err(Error::CorruptInput(format!(
                    "voxel {i} holds {v}, which is not a label id"
                )));
            }
            max = max.max(v as usize);
            labels.push(v as Label);
        }
        let num_classes = num_classes.unwrap_or((max + 1).max(2));
        Self::new(grid.geometry().clone(), num_classes, labels)
    }

    /// Grid for writing: uint8 when every id fits (L ≤ 256), int32 otherwise.
    pub fn to_grid(&self) -> VoxelGrid {
        let data = if self.num_classes <= 256 {
            VolumeData::U8(self.labels.iter().map(|&l| l as u8).collect())
        } else {
            VolumeData::I32(self.labels.iter().map(|&l| l as i32).collect())
        };
        VoxelGrid {
            geometry: self.geometry.clone(),
            kind: ElementKind::LabelId,
            data,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<Label> {
        self.labels
    }

    pub fn num_voxels(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> Label {
        self.labels[self.geometry.index(x, y, z)]
    }

    /// Per-class voxel counts.
    pub fn histogram(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub(crate) fn ensure_compatible(&self, other: &LabelMap, what: &str) -> Result<()> {
        self.geometry.ensure_matches(&other.geometry, what)?;
        if self.num_classes != other.num_classes {
            return Err(Error::IncompatibleVolumes(format!(
                "{what}: {} vs {} classes",
                self.num_classes, other.num_classes
            )));
        }
        Ok(())
    }
}

/// Dense per-class probability planes, stored class-plane-major
/// (`planes[class * V + voxel]`).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseProbabilities {
    geometry: Geometry,
    num_classes: usize,
    planes: Vec<f32>,
}

impl DenseProbabilities {
    /// Validates range and per-voxel normalization within [`PROBABILITY_TOLERANCE`].
    pub fn new(geometry: Geometry, num_classes: usize, planes: Vec<f32>) -> Result<Self> {
        let v = geometry.num_voxels();
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "probability maps need at least 2 classes, got {num_classes}"
            )));
        }
        if planes.len() != v * num_classes {
            return Err(Error::InvalidArgument(format!(
                "probability buffer holds {} values, expected {} x {v}",
                planes.len(),
                num_classes
            )));
        }
        let mut sums = vec![0.0f64; v];
        for (c, plane) in planes.chunks_exact(v).enumerate() {
            for (i, (&p, s)) in plane.iter().zip(sums.iter_mut()).enumerate() {
                let p = p as f64;
                if !(-PROBABILITY_TOLERANCE..=1.0 + PROBABILITY_TOLERANCE).contains(&p) {
                    return Err(Error::InvalidProbability(format!(
                        "class {c} voxel {i} has probability {p}"
                    )));
                }
                *s += p;
            }
        }
        if let Some((i, s)) = sums
            .iter()
            .enumerate()
            .find(|(_, s)| (**s - 1.0).abs() > PROBABILITY_TOLERANCE)
        {
            return Err(Error::InvalidProbability(format!(
                "voxel {i} probabilities sum to {s}"
            )));
        }
        Ok(Self {
            geometry,
            num_classes,
            planes,
        })
    }

    /// Divides every voxel's vector by its sum. Voxels summing to zero become
    /// one-hot on `fallback_class`.
    pub fn renormalized(
        geometry: Geometry,
        num_classes: usize,
        mut planes: Vec<f32>,
        fallback_class: usize,
    ) -> Result<Self> {
        let v = geometry.num_voxels();
        let mut sums = vec![0.0f64; v];
        for plane in planes.chunks_exact(v) {
            for (s, &p) in sums.iter_mut().zip(plane) {
                *s += p.max(0.0) as f64;
            }
        }
        for (c, plane) in planes.chunks_exact_mut(v).enumerate() {
            for (p, &s) in plane.iter_mut().zip(&sums) {
                *p = if s > 0.0 {
                    (p.max(0.0) as f64 / s) as f32
                } else if c == fallback_class {
                    1.0
                } else {
                    0.0
                };
            }
        }
        Self::new(geometry, num_classes, planes)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn planes(&self) -> &[f32] {
        &self.planes
    }

    pub fn plane(&self, class: usize) -> &[f32] {
        let v = self.geometry.num_voxels();
        &self.planes[class * v..(class + 1) * v]
    }
}

/// Per-voxel class-probability vectors, either dense or an implicit one-hot
/// view over a label map.
#[derive(Debug, Clone)]
pub enum ProbabilityMap<'a> {
    Dense(Cow<'a, DenseProbabilities>),
    OneHot(Cow<'a, LabelMap>),
}

/// Implicit one-hot probabilities for a label map; nothing is materialized.
pub fn onehot_view(labels: &LabelMap) -> ProbabilityMap<'_> {
    ProbabilityMap::OneHot(Cow::Borrowed(labels))
}

impl<'a> ProbabilityMap<'a> {
    pub fn geometry(&self) -> &Geometry {
        match self {
            ProbabilityMap::Dense(d) => d.geometry(),
            ProbabilityMap::OneHot(l) => l.geometry(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ProbabilityMap::Dense(d) => d.num_classes(),
            ProbabilityMap::OneHot(l) => l.num_classes(),
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.geometry().num_voxels()
    }

    #[inline]
    pub fn value(&self, voxel: usize, class: usize) -> f32 {
        match self {
            ProbabilityMap::Dense(d) => d.planes[class * d.geometry.num_voxels() + voxel],
            ProbabilityMap::OneHot(l) => (l.labels[voxel] as usize == class) as u8 as f32,
        }
    }

    /// Writes `p(v, class)` for `v` in `voxels` into `out`.
    pub fn fill_plane(&self, class: usize, voxels: Range<usize>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), voxels.len());
        match self {
            ProbabilityMap::Dense(d) => {
                let base = class * d.geometry.num_voxels();
                let src = &d.planes[base + voxels.start..base + voxels.end];
                for (o, &p) in out.iter_mut().zip(src) {
                    *o = p as f64;
                }
            }
            ProbabilityMap::OneHot(l) => {
                for (o, &lab) in out.iter_mut().zip(&l.labels[voxels]) {
                    *o = (lab as usize == class) as u8 as f64;
                }
            }
        }
    }

    /// Per-voxel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        match self {
            ProbabilityMap::OneHot(l) => l.as_ref().clone(),
            ProbabilityMap::Dense(d) => {
                let v = d.geometry.num_voxels();
                let mut best = vec![f32::NEG_INFINITY; v];
                let mut labels = vec![0 as Label; v];
                for (c, plane) in d.planes.chunks_exact(v).enumerate() {
                    for ((b, l), &p) in best.iter_mut().zip(labels.iter_mut()).zip(plane) {
                        if p > *b {
                            *b = p;
                            *l = c as Label;
                        }
                    }
                }
                LabelMap {
                    geometry: d.geometry.clone(),
                    num_classes: d.num_classes,
                    labels,
                }
            }
        }
    }

    /// Materializes the dense planes.
    pub fn to_dense(&self) -> DenseProbabilities {
        match self {
            ProbabilityMap::Dense(d) => d.as_ref().clone(),
            ProbabilityMap::OneHot(l) => {
                let v = l.num_voxels();
                let mut planes = vec![0.0f32; v * l.num_classes];
                for (i, &lab) in l.labels.iter().enumerate() {
                    planes[lab as usize * v + i] = 1.0;
                }
                DenseProbabilities {
                    geometry: l.geometry.clone(),
                    num_classes: l.num_classes,
                    planes,
                }
            }
        }
    }

    pub fn into_owned(self) -> ProbabilityMap<'static> {
        match self {
            ProbabilityMap::Dense(d) => ProbabilityMap::Dense(Cow::Owned(d.into_owned())),
            ProbabilityMap::OneHot(l) => ProbabilityMap::OneHot(Cow::Owned(l.into_owned())),
        }
    }
}

impl From<DenseProbabilities> for ProbabilityMap<'static> {
    fn from(d: DenseProbabilities) -> Self {
        ProbabilityMap::Dense(Cow::Owned(d))
    }
}

impl From<LabelMap> for ProbabilityMap<'static> {
    fn from(l: LabelMap) -> Self {
        ProbabilityMap::OneHot(Cow::Owned(l))
    }
}
