//! Invertible test-time-augmentation transforms.
//!
//! Transforms act in voxel index space. An affine `(M, t)` maps a voxel
//! position `p` to `M (p - c) + c + t`, where `c` is the grid center
//! `(dims - 1) / 2`, so rotations and scalings pivot about the middle of the
//! volume. Applying a transform pulls every output voxel back through the
//! inverse map; positions that fall outside the source grid take the fill
//! value. Integer offsets are pure index shifts and never interpolate.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{det3, inv3, mul3v, Mat3};
use crate::volume::{
    sample_nearest, sample_trilinear, DenseProbabilities, ElementKind, Geometry, Interpolation,
    Label, LabelMap, VolumeData, VoxelGrid,
};

/// Matrices with `|det|` at or below this are rejected as non-invertible.
pub const MIN_DETERMINANT: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TransformSpec {
    #[default]
    Identity,
    IntegerOffset {
        offset: [i64; 3],
    },
    Affine {
        matrix: [[f64; 3]; 3],
        #[serde(default)]
        translation: [f64; 3],
    },
}

impl TransformSpec {
    pub fn offset(dx: i64, dy: i64, dz: i64) -> Self {
        TransformSpec::IntegerOffset {
            offset: [dx, dy, dz],
        }
    }

    /// Rotation by `angle` radians about the z axis through the grid center.
    pub fn rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        TransformSpec::Affine {
            matrix: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let TransformSpec::Affine {
            matrix,
            translation,
        } = self
        {
            let det = det3(matrix);
            if !(det.abs() > MIN_DETERMINANT) || !det.is_finite() {
                return Err(Error::InvalidTransform(format!(
                    "affine matrix is not invertible: determinant {det:e} (|det| must exceed {MIN_DETERMINANT:e})"
                )));
            }
            if translation
                .iter()
                .chain(matrix.iter().flatten())
                .any(|v| !v.is_finite())
            {
                return Err(Error::InvalidTransform(
                    "affine contains non-finite entries".into(),
                ));
            }
        }
        Ok(())
    }

    /// Parses and validates the JSON form `{kind, offset?, matrix?, translation?}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: TransformSpec = serde_json::from_str(text)
            .map_err(|e| Error::InvalidSpec(format!("transform spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn is_identity(&self) -> bool {
        match self {
            TransformSpec::Identity => true,
            TransformSpec::IntegerOffset { offset } => *offset == [0; 3],
            TransformSpec::Affine { .. } => false,
        }
    }

    /// Forward map of a continuous voxel position.
    pub fn forward_point(&self, dims: [usize; 3], p: [f64; 3]) -> [f64; 3] {
        match self {
            TransformSpec::Identity => p,
            TransformSpec::IntegerOffset { offset } => [
                p[0] + offset[0] as f64,
                p[1] + offset[1] as f64,
                p[2] + offset[2] as f64,
            ],
            TransformSpec::Affine {
                matrix,
                translation,
            } => affine_map(matrix, translation, dims, p),
        }
    }

    fn inverse_map(&self) -> Result<PointMap> {
        self.validate()?;
        Ok(match self {
            TransformSpec::Identity => PointMap::Shift([0; 3]),
            TransformSpec::IntegerOffset { offset } => PointMap::Shift(offset.map(|d| -d)),
            TransformSpec::Affine {
                matrix,
                translation,
            } => {
                let inv = inv3(matrix);
                let t = mul3v(&inv, *translation).map(|v| -v);
                PointMap::Affine(inv, t)
            }
        })
    }
}

fn affine_map(matrix: &Mat3, translation: &[f64; 3], dims: [usize; 3], p: [f64; 3]) -> [f64; 3] {
    let c = center(dims);
    let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
    let r = mul3v(matrix, d);
    [
        r[0] + c[0] + translation[0],
        r[1] + c[1] + translation[1],
        r[2] + c[2] + translation[2],
    ]
}

fn center(dims: [usize; 3]) -> [f64; 3] {
    dims.map(|n| (n as f64 - 1.0) * 0.5)
}

/// Map from output voxel to source position (the inverse of the transform).
enum PointMap {
    Shift([i64; 3]),
    Affine(Mat3, [f64; 3]),
}

impl PointMap {
    /// Source voxel for nearest/shift sampling.
    fn source_index(&self, dims: [usize; 3], q: [usize; 3]) -> Option<usize> {
        match self {
            PointMap::Shift(d) => {
                let mut idx = [0usize; 3];
                for a in 0..3 {
                    let s = q[a] as i64 + d[a];
                    if s < 0 || s >= dims[a] as i64 {
                        return None;
                    }
                    idx[a] = s as usize;
                }
                Some(idx[0] + dims[0] * (idx[1] + dims[1] * idx[2]))
            }
            PointMap::Affine(m, t) => sample_nearest(dims, self.source_point_affine(m, t, dims, q)),
        }
    }

    fn source_point(&self, dims: [usize; 3], q: [usize; 3]) -> [f64; 3] {
        match self {
            PointMap::Shift(d) => [
                q[0] as f64 + d[0] as f64,
                q[1] as f64 + d[1] as f64,
                q[2] as f64 + d[2] as f64,
            ],
            PointMap::Affine(m, t) => self.source_point_affine(m, t, dims, q),
        }
    }

    fn source_point_affine(
        &self,
        m: &Mat3,
        t: &[f64; 3],
        dims: [usize; 3],
        q: [usize; 3],
    ) -> [f64; 3] {
        affine_map(m, t, dims, [q[0] as f64, q[1] as f64, q[2] as f64])
    }

    fn is_shift(&self) -> bool {
        matches!(self, PointMap::Shift(_))
    }
}

/// Inverse transform: offsets negate, `(M, t)` becomes `(M⁻¹, -M⁻¹ t)`.
pub fn invert(spec: &TransformSpec) -> TransformSpec {
    match spec {
        TransformSpec::Identity => TransformSpec::Identity,
        TransformSpec::IntegerOffset { offset } => TransformSpec::IntegerOffset {
            offset: offset.map(|d| -d),
        },
        TransformSpec::Affine {
            matrix,
            translation,
        } => {
            let inv = inv3(matrix);
            let t = mul3v(&inv, *translation).map(|v| -v);
            TransformSpec::Affine {
                matrix: inv,
                translation: t,
            }
        }
    }
}

/// Out-of-domain fill values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FillPolicy {
    /// Label for voxels mapped from outside the grid; probabilities are
    /// filled one-hot on this class.
    pub label_fill: Label,
    /// Hounsfield value for intensity volumes (air).
    pub intensity_fill: f64,
}

impl Default for FillPolicy {
    fn default() -> Self {
        Self {
            label_fill: 0,
            intensity_fill: -1024.0,
        }
    }
}

impl FillPolicy {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.label_fill as usize >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "fill label {} is not below the class count {num_classes}",
                self.label_fill
            )));
        }
        Ok(())
    }

    fn scalar_for(&self, kind: ElementKind) -> f64 {
        match kind {
            ElementKind::LabelId => self.label_fill as f64,
            ElementKind::IntensityHu => self.intensity_fill,
            ElementKind::Probability | ElementKind::Uncertainty => 0.0,
        }
    }
}

/// How label maps are carried through an affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelResampling {
    /// Nearest-neighbour lookup.
    #[default]
    Nearest,
    /// Trilinear interpolation of the one-hot planes followed by argmax.
    OneHotArgmax,
}

fn voxel_positions(dims: [usize; 3]) -> impl IndexedParallelIterator<Item = [usize; 3]> {
    let n = dims[0] * dims[1] * dims[2];
    (0..n).into_par_iter().map(move |i| {
        [
            i % dims[0],
            (i / dims[0]) % dims[1],
            i / (dims[0] * dims[1]),
        ]
    })
}

/// Applies `spec` to a 3D grid. Label grids require nearest interpolation.
pub fn apply(
    spec: &TransformSpec,
    grid: &VoxelGrid,
    interp: Interpolation,
    fill: &FillPolicy,
) -> Result<VoxelGrid> {
    if grid.kind() == ElementKind::LabelId && interp != Interpolation::Nearest {
        return Err(Error::InvalidArgument(
            "label grids are transformed with nearest-neighbour interpolation only".into(),
        ));
    }
    let map = spec.inverse_map()?;
    if spec.is_identity() {
        return Ok(grid.clone());
    }
    let dims = grid.geometry().dims;
    let fill_value = fill.scalar_for(grid.kind());
    let data = if map.is_shift() || interp == Interpolation::Nearest {
        let source: Vec<Option<usize>> = voxel_positions(dims)
            .map(|q| map.source_index(dims, q))
            .collect();
        grid.data().gather(&source, fill_value)
    } else {
        let values: Vec<f64> = voxel_positions(dims)
            .map(|q| {
                sample_trilinear(dims, map.source_point(dims, q), |j| grid.data().get(j))
                    .unwrap_or(fill_value)
            })
            .collect();
        grid.data().with_values_like(values)
    };
    VoxelGrid::new(grid.geometry().clone(), grid.kind(), data)
}

/// Applies `spec` to a label map.
pub fn apply_labels(
    spec: &TransformSpec,
    labels: &LabelMap,
    mode: LabelResampling,
    fill: &FillPolicy,
) -> Result<LabelMap> {
    fill.validate(labels.num_classes())?;
    let map = spec.inverse_map()?;
    if spec.is_identity() {
        return Ok(labels.clone());
    }
    let dims = labels.geometry().dims;
    let src = labels.labels();
    let out: Vec<Label> = if map.is_shift() || mode == LabelResampling::Nearest {
        voxel_positions(dims)
            .map(|q| {
                map.source_index(dims, q)
                    .map_or(fill.label_fill, |i| src[i])
            })
            .collect()
    } else {
        voxel_positions(dims)
            .map(|q| onehot_argmax(dims, src, map.source_point(dims, q)).unwrap_or(fill.label_fill))
            .collect()
    };
    LabelMap::new(labels.geometry().clone(), labels.num_classes(), out)
}

/// Argmax of trilinearly interpolated one-hot planes at `p`; ties go to the
/// lowest label.
fn onehot_argmax(dims: [usize; 3], labels: &[Label], p: [f64; 3]) -> Option<Label> {
    let mut base = [0usize; 3];
    let mut w = [0.0f64; 3];
    for a in 0..3 {
        let max = (dims[a] - 1) as f64;
        if p[a] < -1e-9 || p[a] > max + 1e-9 {
            return None;
        }
        let x = p[a].clamp(0.0, max);
        base[a] = x.floor() as usize;
        w[a] = x - x.floor();
    }
    let mut acc: [(Label, f64); 8] = [(0, 0.0); 8];
    let mut used = 0usize;
    for corner in 0..8 {
        let mut idx = [0usize; 3];
        let mut weight = 1.0;
        for a in 0..3 {
            let up = (corner >> a) & 1 == 1;
            idx[a] = if up {
                (base[a] + 1).min(dims[a] - 1)
            } else {
                base[a]
            };
            weight *= if up { w[a] } else { 1.0 - w[a] };
        }
        let lab = labels[idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])];
        match acc[..used].iter_mut().find(|(l, _)| *l == lab) {
            Some(slot) => slot.1 += weight,
            None => {
                acc[used] = (lab, weight);
                used += 1;
            }
        }
    }
    acc[..used]
        .iter()
        .copied()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| l)
}

/// Applies `spec` to class planes. Affine transforms interpolate each plane
/// trilinearly and renormalize every voxel; integer offsets shift exactly.
/// Voxels mapped from outside the grid become one-hot on the fill label.
pub fn apply_probabilities(
    spec: &TransformSpec,
    probs: &DenseProbabilities,
    fill: &FillPolicy,
) -> Result<DenseProbabilities> {
    let classes = probs.num_classes();
    fill.validate(classes)?;
    let map = spec.inverse_map()?;
    if spec.is_identity() {
        return Ok(probs.clone());
    }
    let dims = probs.geometry().dims;
    let v = probs.geometry().num_voxels();
    let fill_class = fill.label_fill as usize;
    let mut planes = vec![0.0f32; v * classes];
    if map.is_shift() {
        let source: Vec<Option<usize>> = voxel_positions(dims)
            .map(|q| map.source_index(dims, q))
            .collect();
        planes.par_chunks_mut(v).enumerate().for_each(|(c, plane)| {
            let src = probs.plane(c);
            let outside = if c == fill_class { 1.0 } else { 0.0 };
            for (o, s) in plane.iter_mut().zip(&source) {
                *o = s.map_or(outside, |i| src[i]);
            }
        });
        return DenseProbabilities::new(probs.geometry().clone(), classes, planes);
    }
    let points: Vec<[f64; 3]> = voxel_positions(dims)
        .map(|q| map.source_point(dims, q))
        .collect();
    planes.par_chunks_mut(v).enumerate().for_each(|(c, plane)| {
        let src = probs.plane(c);
        let outside = if c == fill_class { 1.0 } else { 0.0 };
        for (o, p) in plane.iter_mut().zip(&points) {
            *o = sample_trilinear(dims, *p, |j| src[j] as f64).map_or(outside, |x| x as f32);
        }
    });
    DenseProbabilities::renormalized(probs.geometry().clone(), classes, planes, fill_class)
}

/// Binary mask (1 = valid) of voxels whose forward image lands inside the
/// grid and maps back inside under the inverse.
pub fn valid_mask(spec: &TransformSpec, dims: [usize; 3]) -> Result<VoxelGrid> {
    let geometry = Geometry::new(dims, [1.0; 3])?;
    spec.validate()?;
    let inverse = spec.inverse_map()?;
    let forward = invert(spec).inverse_map()?;
    let mask: Vec<u8> = voxel_positions(dims)
        .map(|p| {
            let Some(q) = forward.source_index(dims, p) else {
                return 0;
            };
            let q = [
                q % dims[0],
                (q / dims[0]) % dims[1],
                q / (dims[0] * dims[1]),
            ];
            inverse.source_index(dims, q).is_some() as u8
        })
        .collect();
    VoxelGrid::new(geometry, ElementKind::LabelId, VolumeData::U8(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{mul3, IDENTITY3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(dims: [usize; 3]) -> Geometry {
        Geometry::new(dims, [1.0; 3]).unwrap()
    }

    fn random_labels(dims: [usize; 3], classes: u16, seed: u64) -> LabelMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = geom(dims);
        let labels = (0..g.num_voxels())
            .map(|_| rng.gen_range(1..classes))
            .collect();
        LabelMap::new(g, classes as usize, labels).unwrap()
    }

    #[test]
    fn identity_is_voxel_identical() {
        let m = random_labels([6, 7, 8], 5, 1);
        let out = apply_labels(
            &TransformSpec::Identity,
            &m,
            LabelResampling::Nearest,
            &FillPolicy::default(),
        )
        .unwrap();
        assert_eq!(out, m);
        let grid = apply(
            &TransformSpec::Identity,
            &m.to_grid(),
            Interpolation::Nearest,
            &FillPolicy::default(),
        )
        .unwrap();
        assert_eq!(grid, m.to_grid());
    }

    #[test]
    fn unit_offset_moves_marked_voxel() {
        let g = geom([10, 10, 10]);
        let mut labels = vec![0u16; 1000];
        labels[g.index(5, 5, 5)] = 1;
        let m = LabelMap::new(g.clone(), 2, labels).unwrap();
        let out = apply_labels(
            &TransformSpec::offset(1, 0, 0),
            &m,
            LabelResampling::Nearest,
            &FillPolicy::default(),
        )
        .unwrap();
        assert_eq!(out.get(6, 5, 5), 1);
        assert_eq!(out.labels().iter().filter(|&&l| l == 1).count(), 1);
    }

    #[test]
    fn quarter_turn_matches_index_permutation() {
        let n = 16;
        let dims = [n, n, 8];
        let g = geom(dims);
        let mut labels = vec![0u16; g.num_voxels()];
        // axis-aligned box x in [2, 9), y in [4, 7), z in [1, 5)
        for z in 1..5 {
            for y in 4..7 {
                for x in 2..9 {
                    labels[g.index(x, y, z)] = 1;
                }
            }
        }
        let m = LabelMap::new(g.clone(), 2, labels).unwrap();
        let spec = TransformSpec::rotation_z(std::f64::consts::FRAC_PI_2);
        let out =
            apply_labels(&spec, &m, LabelResampling::Nearest, &FillPolicy::default()).unwrap();
        // oracle: (x, y) -> (n - 1 - y, x)
        let mut expected = vec![0u16; g.num_voxels()];
        for z in 0..dims[2] {
            for y in 0..n {
                for x in 0..n {
                    expected[g.index(n - 1 - y, x, z)] = m.get(x, y, z);
                }
            }
        }
        assert_eq!(out.labels(), &expected[..]);
    }

    #[test]
    fn invert_examples() {
        assert_eq!(
            invert(&TransformSpec::offset(2, -1, 3)),
            TransformSpec::offset(-2, 1, -3)
        );
        assert_eq!(invert(&TransformSpec::Identity), TransformSpec::Identity);
        let matrix = [[1.1, 0.2, 0.0], [-0.1, 0.9, 0.05], [0.0, 0.3, 1.2]];
        let spec = TransformSpec::Affine {
            matrix,
            translation: [1.0, -2.0, 0.5],
        };
        let TransformSpec::Affine {
            matrix: inv,
            translation,
        } = invert(&spec)
        else {
            panic!("affine expected");
        };
        let p = mul3(&matrix, &inv);
        for r in 0..3 {
            for c in 0..3 {
                assert!((p[r][c] - IDENTITY3[r][c]).abs() < 1e-10);
            }
        }
        // -M^-1 t, checked by mapping t back through M
        let back = mul3v(&matrix, translation);
        assert!(
            (back[0] + 1.0).abs() < 1e-10
                && (back[1] - 2.0).abs() < 1e-10
                && (back[2] + 0.5).abs() < 1e-10
        );
    }

    #[test]
    fn singular_affine_is_rejected() {
        let spec = TransformSpec::Affine {
            matrix: [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        };
        let err = apply_labels(
            &spec,
            &random_labels([4, 4, 4], 3, 0),
            LabelResampling::Nearest,
            &FillPolicy::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidTransform(ref msg) if msg.contains("determinant")));
        assert!(TransformSpec::from_json(
            r#"{"kind":"affine","matrix":[[0,0,0],[0,1,0],[0,0,1]]}"#
        )
        .is_err());
    }

    #[test]
    fn json_shape() {
        let spec =
            TransformSpec::from_json(r#"{"kind":"integer-offset","offset":[1,2,3]}"#).unwrap();
        assert_eq!(spec, TransformSpec::offset(1, 2, 3));
        assert_eq!(
            TransformSpec::from_json(r#"{"kind":"identity"}"#).unwrap(),
            TransformSpec::Identity
        );
        assert!(matches!(
            TransformSpec::from_json(r#"{"kind":"integer-offset","offset":[1.5,0,0]}"#),
            Err(Error::InvalidSpec(_))
        ));
        let text = serde_json::to_string(&TransformSpec::offset(0, 0, 1)).unwrap();
        assert_eq!(text, r#"{"kind":"integer-offset","offset":[0,0,1]}"#);
    }

    #[test]
    fn valid_mask_examples() {
        let ones = |g: &VoxelGrid| g.data().to_f64().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(
            ones(&valid_mask(&TransformSpec::Identity, [5, 6, 7]).unwrap()),
            210
        );
        let mask = valid_mask(&TransformSpec::offset(3, 0, 0), [10, 4, 5]).unwrap();
        assert_eq!(ones(&mask), 7 * 4 * 5);
        for x in 0..10 {
            assert_eq!(mask.get(x, 0, 0), if x <= 6 { 1.0 } else { 0.0 });
        }
        let tiny = valid_mask(&TransformSpec::rotation_z(1e-9), [9, 9, 9]).unwrap();
        assert_eq!(ones(&tiny), 729);
    }

    #[test]
    fn fill_label_must_exist() {
        let fill = FillPolicy {
            label_fill: 5,
            ..FillPolicy::default()
        };
        assert!(apply_labels(
            &TransformSpec::offset(1, 0, 0),
            &random_labels([4, 4, 4], 3, 0),
            LabelResampling::Nearest,
            &fill
        )
        .is_err());
    }

    #[test]
    fn intensity_fill_is_air() {
        let g = geom([4, 4, 4]);
        let grid =
            VoxelGrid::new(g, ElementKind::IntensityHu, VolumeData::I16(vec![100; 64])).unwrap();
        let out = apply(
            &TransformSpec::offset(0, 0, 2),
            &grid,
            Interpolation::Trilinear,
            &FillPolicy::default(),
        )
        .unwrap();
        assert_eq!(out.get(0, 0, 0), -1024.0);
        assert_eq!(out.get(0, 0, 3), 100.0);
        assert!(apply(
            &TransformSpec::offset(1, 0, 0),
            &random_labels([4, 4, 4], 3, 0).to_grid(),
            Interpolation::Trilinear,
            &FillPolicy::default()
        )
        .is_err());
    }

    #[test]
    fn probabilities_stay_normalized_under_rotation() {
        let labels = random_labels([12, 12, 6], 4, 9);
        let dense = crate::volume::onehot_view(&labels).to_dense();
        let out = apply_probabilities(
            &TransformSpec::rotation_z(0.3),
            &dense,
            &FillPolicy::default(),
        )
        .unwrap();
        let v = out.geometry().num_voxels();
        for i in 0..v {
            let s: f64 = (0..4).map(|c| out.plane(c)[i] as f64).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        let shifted = apply_probabilities(
            &TransformSpec::offset(-2, 0, 0),
            &dense,
            &FillPolicy::default(),
        )
        .unwrap();
        // right edge is filled one-hot background
        let g = shifted.geometry().clone();
        assert_eq!(shifted.plane(0)[g.index(11, 0, 0)], 1.0);
    }

    #[test]
    fn onehot_argmax_keeps_labels_from_input() {
        let labels = random_labels([10, 10, 10], 6, 4);
        let present: std::collections::BTreeSet<u16> = labels.labels().iter().copied().collect();
        let out = apply_labels(
            &TransformSpec::rotation_z(0.2),
            &labels,
            LabelResampling::OneHotArgmax,
            &FillPolicy::default(),
        )
        .unwrap();
        assert!(out.labels().iter().all(|l| present.contains(l) || *l == 0));
    }
}
