//! Minimal single-file NIfTI-1 (`.nii` / `.nii.gz`) reader and writer.
//!
//! Honored header fields: dim, datatype, bitpix, pixdim, vox_offset,
//! scl_slope/scl_inter, qform/sform codes and matrices, intent_p1,
//! intent_code and intent_name. Written files always carry an sform; the
//! reader prefers sform over qform.
//!
//! Element kind and class count travel in `intent_name` and `intent_p1` so a
//! label map or uncertainty map written here reads back as the same thing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Affine, DenseProbabilities, ElementKind, Geometry, LabelMap, VolumeData, VoxelGrid};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const NIFTI_INTENT_LABEL: i16 = 1002;
const NIFTI_INTENT_ESTIMATE: i16 = 1001;
const NIFTI_UNITS_MM: u8 = 2;
const DESCRIPTION: &[u8] = b"ensemble-uq; affine=sform";

mod offsets {
    pub const DIM: usize = 40;
    pub const INTENT_P1: usize = 56;
    pub const INTENT_CODE: usize = 68;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const INTENT_NAME: usize = 328;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DataType {
    U8,
    I16,
    I32,
    F32,
}

impl DataType {
    fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(DataType::U8),
            4 => Some(DataType::I16),
            8 => Some(DataType::I32),
            16 => Some(DataType::F32),
            _ => None,
        }
    }

    fn code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::I32 => 8,
            DataType::F32 => 16,
        }
    }

    fn bytes(self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 => 2,
            DataType::I32 | DataType::F32 => 4,
        }
    }

    fn of(data: &VolumeData) -> Self {
        match data {
            VolumeData::U8(_) => DataType::U8,
            VolumeData::I16(_) => DataType::I16,
            VolumeData::I32(_) => DataType::I32,
            VolumeData::F32(_) => DataType::F32,
        }
    }
}

/// Decoded header fields.
#[derive(Debug, Clone)]
struct Header {
    big_endian: bool,
    dims: Vec<usize>,
    datatype: DataType,
    pixdim: [f32; 8],
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    intent_p1: f32,
    intent_code: i16,
    intent_name: String,
    qform_code: i16,
    sform_code: i16,
    quatern: [f32; 3],
    qoffset: [f32; 3],
    srow: [[f32; 4]; 3],
}

impl Header {
    fn parse(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_SIZE {
            return Err(Error::CorruptInput(format!(
                "file holds {} bytes, shorter than the {HEADER_SIZE}-byte header",
                buf.len()
            )));
        }
        let big_endian = if LittleEndian::read_i32(&buf[0..4]) == HEADER_SIZE as i32 {
            false
        } else if BigEndian::read_i32(&buf[0..4]) == HEADER_SIZE as i32 {
            true
        } else {
            return Err(Error::UnsupportedFormat(
                "sizeof_hdr is not 348; not a NIfTI-1 file".into(),
            ));
        };
        if big_endian {
            Self::parse_with::<BigEndian>(buf, true)
        } else {
            Self::parse_with::<LittleEndian>(buf, false)
        }
    }

    fn parse_with<B: ByteOrder>(buf: &[u8], big_endian: bool) -> Result<Self> {
        use offsets::*;
        let magic = &buf[MAGIC..MAGIC + 4];
        if magic != b"n+1\0" {
            return Err(Error::UnsupportedFormat(format!(
                "magic {:?} is not single-file NIfTI-1 (\"n+1\")",
                String::from_utf8_lossy(&magic[..3])
            )));
        }
        let i16_at = |o: usize| B::read_i16(&buf[o..o + 2]);
        let f32_at = |o: usize| B::read_f32(&buf[o..o + 4]);

        let ndim = i16_at(DIM);
        if !(1..=7).contains(&ndim) {
            return Err(Error::UnsupportedFormat(format!("dim[0] = {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        for k in 1..=ndim as usize {
            let d = i16_at(DIM + 2 * k);
            if d <= 0 {
                return Err(Error::CorruptInput(format!("dim[{k}] = {d}")));
            }
            dims.push(d as usize);
        }

        let code = i16_at(DATATYPE);
        let datatype = DataType::from_code(code)
            .ok_or_else(|| Error::UnsupportedFormat(format!("datatype code {code}")))?;
        let bitpix = i16_at(BITPIX);
        if bitpix as usize != datatype.bytes() * 8 {
            return Err(Error::CorruptInput(format!(
                "bitpix {bitpix} disagrees with datatype {code}"
            )));
        }

        let mut pixdim = [0f32; 8];
        for (k, p) in pixdim.iter_mut().enumerate() {
            *p = f32_at(PIXDIM + 4 * k);
        }
        let vox_offset = f32_at(VOX_OFFSET);
        if !(vox_offset >= HEADER_SIZE as f32) {
            return Err(Error::CorruptInput(format!("vox_offset {vox_offset}")));
        }

        let name_raw = &buf[INTENT_NAME..INTENT_NAME + 16];
        let name_end = name_raw.iter().position(|&b| b == 0).unwrap_or(16);
        let intent_name = String::from_utf8_lossy(&name_raw[..name_end]).into_owned();

        let mut srow = [[0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(SROW_X + 16 * r + 4 * c);
            }
        }

        Ok(Header {
            big_endian,
            dims,
            datatype,
            pixdim,
            vox_offset: vox_offset as usize,
            scl_slope: f32_at(SCL_SLOPE),
            scl_inter: f32_at(SCL_INTER),
            intent_p1: f32_at(INTENT_P1),
            intent_code: i16_at(INTENT_CODE),
            intent_name,
            qform_code: i16_at(QFORM_CODE),
            sform_code: i16_at(SFORM_CODE),
            quatern: [
                f32_at(QUATERN_B),
                f32_at(QUATERN_B + 4),
                f32_at(QUATERN_B + 8),
            ],
            qoffset: [
                f32_at(QOFFSET_X),
                f32_at(QOFFSET_X + 4),
                f32_at(QOFFSET_X + 8),
            ],
            srow,
        })
    }

    /// Spatial dims and the count of 3D volumes (product of dims 4..7).
    fn spatial(&self) -> ([usize; 3], usize) {
        let mut xyz = [1usize; 3];
        for (k, d) in self.dims.iter().take(3).enumerate() {
            xyz[k] = *d;
        }
        let extra = self.dims.iter().skip(3).product();
        (xyz, extra)
    }

    fn spacing(&self) -> Result<[f64; 3]> {
        let mut s = [1.0f64; 3];
        for (k, v) in s.iter_mut().enumerate() {
            let p = self.pixdim[k + 1].abs() as f64;
            if k < self.dims.len() {
                if !(p > 0.0 && p.is_finite()) {
                    return Err(Error::CorruptInput(format!("pixdim[{}] = {p}", k + 1)));
                }
                *v = p;
            } else if p > 0.0 && p.is_finite() {
                *v = p;
            }
        }
        Ok(s)
    }

    fn affine(&self, spacing: [f64; 3]) -> Affine {
        let mut a = [[0.0; 4]; 4];
        a[3][3] = 1.0;
        if self.sform_code > 0 {
            for (r, row) in self.srow.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    a[r][c] = *v as f64;
                }
            }
        } else if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(|q| q as f64);
            let a0 = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let rot = [
                [
                    a0 * a0 + b * b - c * c - d * d,
                    2.0 * (b * c - a0 * d),
                    2.0 * (b * d + a0 * c),
                ],
                [
                    2.0 * (b * c + a0 * d),
                    a0 * a0 + c * c - b * b - d * d,
                    2.0 * (c * d - a0 * b),
                ],
                [
                    2.0 * (b * d - a0 * c),
                    2.0 * (c * d + a0 * b),
                    a0 * a0 + d * d - c * c - b * b,
                ],
            ];
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let scale = [spacing[0], spacing[1], spacing[2] * qfac];
            for r in 0..3 {
                for c in 0..3 {
                    a[r][c] = rot[r][c] * scale[c];
                }
                a[r][3] = self.qoffset[r] as f64;
            }
        } else {
            for k in 0..3 {
                a[k][k] = spacing[k];
            }
        }
        a
    }

    fn element_kind(&self) -> ElementKind {
        ElementKind::from_tag(&self.intent_name).unwrap_or(
            if self.intent_code == NIFTI_INTENT_LABEL {
                ElementKind::LabelId
            } else {
                ElementKind::IntensityHu
            },
        )
    }

    fn declared_classes(&self) -> Option<usize> {
        let p = self.intent_p1;
        (p >= 2.0 && p.fract() == 0.0 && p <= super::MAX_CLASSES as f32).then_some(p as usize)
    }

    fn scaling(&self) -> Option<(f64, f64)> {
        let slope = self.scl_slope;
        let inter = self.scl_inter;
        if slope == 0.0 || !slope.is_finite() || (slope == 1.0 && inter == 0.0) {
            None
        } else {
            Some((
                slope as f64,
                if inter.is_finite() { inter as f64 } else { 0.0 },
            ))
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::with_capacity(bytes.len() * 4);
        MultiGzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::CorruptInput(format!("{}: gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn decode_data(header: &Header, raw: &[u8], count: usize) -> Result<VolumeData> {
    let start = header.vox_offset;
    let len = count * header.datatype.bytes();
    let end = start + len;
    if raw.len() < end {
        return Err(Error::CorruptInput(format!(
            "data section truncated: need {end} bytes, file has {}",
            raw.len()
        )));
    }
    let bytes = &raw[start..end];
    let data = match (header.datatype, header.big_endian) {
        (DataType::U8, _) => VolumeData::U8(bytes.to_vec()),
        (DataType::I16, be) => {
            let mut v = vec![0i16; count];
            if be {
                BigEndian::read_i16_into(bytes, &mut v)
            } else {
                LittleEndian::read_i16_into(bytes, &mut v)
            }
            VolumeData::I16(v)
        }
        (DataType::I32, be) => {
            let mut v = vec![0i32; count];
            if be {
                BigEndian::read_i32_into(bytes, &mut v)
            } else {
                LittleEndian::read_i32_into(bytes, &mut v)
            }
            VolumeData::I32(v)
        }
        (DataType::F32, be) => {
            let mut v = vec![0f32; count];
            if be {
                BigEndian::read_f32_into(bytes, &mut v)
            } else {
                LittleEndian::read_f32_into(bytes, &mut v)
            }
            VolumeData::F32(v)
        }
    };
    Ok(match header.scaling() {
        Some((slope, inter)) => VolumeData::F32(
            (0..data.len())
                .map(|i| (data.get(i) * slope + inter) as f32)
                .collect(),
        ),
        None => data,
    })
}

fn geometry_of(header: &Header) -> Result<Geometry> {
    let (dims, _) = header.spatial();
    let spacing = header.spacing()?;
    Geometry::with_affine(dims, spacing, header.affine(spacing))
        .map_err(|e| Error::CorruptInput(format!("header geometry: {e}")))
}

/// Reads a 3D single-file NIfTI-1 volume.
pub fn read_volume(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let raw = read_file(path)?;
    let header = Header::parse(&raw)?;
    let (_, extra) = header.spatial();
    if extra != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{} has {} dimensions; expected a 3D volume",
            path.display(),
            header.dims.len()
        )));
    }
    let geometry = geometry_of(&header)?;
    let data = decode_data(&header, &raw, geometry.num_voxels())?;
    VoxelGrid::new(geometry, header.element_kind(), data)
}

/// Reads a 4D float32 file whose fourth axis holds one probability plane per class.
pub fn read_probability_map(path: impl AsRef<Path>) -> Result<DenseProbabilities> {
    let path = path.as_ref();
    let raw = read_file(path)?;
    let header = Header::parse(&raw)?;
    read_probability_from(&header, &raw, path)
}

fn read_probability_from(header: &Header, raw: &[u8], path: &Path) -> Result<DenseProbabilities> {
    let (_, classes) = header.spatial();
    if header.dims.len() != 4 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: probability maps are 4D (x, y, z, class)",
            path.display()
        )));
    }
    let geometry = geometry_of(header)?;
    let data = decode_data(header, raw, geometry.num_voxels() * classes)?;
    let planes = match data {
        VolumeData::F32(v) => v,
        other => (0..other.len()).map(|i| other.get(i) as f32).collect(),
    };
    DenseProbabilities::new(geometry, classes, planes)
}

/// A member prediction as stored on disk: a hard label map or class planes.
#[derive(Debug, Clone)]
pub enum Prediction {
    Labels(LabelMap),
    Probabilities(DenseProbabilities),
}

impl Prediction {
    pub fn geometry(&self) -> &Geometry {
        match self {
            Prediction::Labels(l) => l.geometry(),
            Prediction::Probabilities(p) => p.geometry(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Prediction::Labels(l) => l.num_classes(),
            Prediction::Probabilities(p) => p.num_classes(),
        }
    }
}

/// Reads either a 3D label map or a 4D probability map, decided by the
/// header. `num_classes` overrides the class count declared in the file.
pub fn read_prediction(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Prediction> {
    let path = path.as_ref();
    let raw = read_file(path)?;
    let header = Header::parse(&raw)?;
    let (_, extra) = header.spatial();
    if header.dims.len() == 4 && extra > 1 {
        let probs = read_probability_from(&header, &raw, path)?;
        if let Some(l) = num_classes {
            if l != probs.num_classes() {
                return Err(Error::IncompatibleMember(format!(
                    "{} holds {} class planes, expected {l}",
                    path.display(),
                    probs.num_classes()
                )));
            }
        }
        return Ok(Prediction::Probabilities(probs));
    }
    if extra != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {} dimensions",
            path.display(),
            header.dims.len()
        )));
    }
    let geometry = geometry_of(&header)?;
    let data = decode_data(&header, &raw, geometry.num_voxels())?;
    let grid = VoxelGrid::new(geometry, ElementKind::LabelId, data)?;
    let labels = LabelMap::from_grid(&grid, num_classes.or_else(|| header.declared_classes()))
        .map_err(|e| match e {
            Error::InvalidArgument(msg) => {
                Error::CorruptInput(format!("{}: {msg}", path.display()))
            }
            other => other,
        })?;
    Ok(Prediction::Labels(labels))
}

fn encode_header(
    geometry: &Geometry,
    extra_dim: Option<usize>,
    datatype: DataType,
    kind: ElementKind,
    num_classes: Option<usize>,
) -> Result<[u8; DATA_OFFSET]> {
    use offsets::*;
    type E = LittleEndian;
    let mut h = [0u8; DATA_OFFSET];
    E::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';

    let mut dims = geometry.dims.to_vec();
    if let Some(t) = extra_dim {
        dims.push(t);
    }
    E::write_i16(&mut h[DIM..DIM + 2], dims.len() as i16);
    for (k, d) in dims.iter().enumerate() {
        let d = i16::try_from(*d).map_err(|_| {
            Error::UnsupportedFormat(format!("dimension {d} exceeds the NIfTI-1 limit"))
        })?;
        E::write_i16(&mut h[DIM + 2 * (k + 1)..DIM + 2 * (k + 2)], d);
    }
    for k in dims.len() + 1..8 {
        E::write_i16(&mut h[DIM + 2 * k..DIM + 2 * k + 2], 1);
    }

    if let Some(l) = num_classes {
        E::write_f32(&mut h[INTENT_P1..INTENT_P1 + 4], l as f32);
    }
    let intent = match kind {
        ElementKind::LabelId => NIFTI_INTENT_LABEL,
        ElementKind::Uncertainty => NIFTI_INTENT_ESTIMATE,
        _ => 0,
    };
    E::write_i16(&mut h[INTENT_CODE..INTENT_CODE + 2], intent);
    E::write_i16(&mut h[DATATYPE..DATATYPE + 2], datatype.code());
    E::write_i16(&mut h[BITPIX..BITPIX + 2], (datatype.bytes() * 8) as i16);

    // qfac
    E::write_f32(&mut h[PIXDIM..PIXDIM + 4], 1.0);
    for (k, s) in geometry.spacing.iter().enumerate() {
        E::write_f32(
            &mut h[PIXDIM + 4 * (k + 1)..PIXDIM + 4 * (k + 2)],
            *s as f32,
        );
    }
    for k in 4..8 {
        E::write_f32(&mut h[PIXDIM + 4 * k..PIXDIM + 4 * k + 4], 1.0);
    }
    E::write_f32(&mut h[VOX_OFFSET..VOX_OFFSET + 4], DATA_OFFSET as f32);
    E::write_f32(&mut h[SCL_SLOPE..SCL_SLOPE + 4], 1.0);
    E::write_f32(&mut h[SCL_INTER..SCL_INTER + 4], 0.0);
    h[XYZT_UNITS] = NIFTI_UNITS_MM;
    h[DESCRIP..DESCRIP + DESCRIPTION_LEN].copy_from_slice(DESCRIPTION);

    E::write_i16(&mut h[QFORM_CODE..QFORM_CODE + 2], 0);
    E::write_i16(&mut h[SFORM_CODE..SFORM_CODE + 2], 1);
    for r in 0..3 {
        for c in 0..4 {
            let o = SROW_X + 16 * r + 4 * c;
            E::write_f32(&mut h[o..o + 4], geometry.affine[r][c] as f32);
        }
    }
    let tag = kind.tag().as_bytes();
    h[INTENT_NAME..INTENT_NAME + tag.len()].copy_from_slice(tag);
    h[MAGIC..MAGIC + 4].copy_from_slice(b"n+1\0");
    Ok(h)
}

const DESCRIPTION_LEN: usize = DESCRIPTION.len();

fn encode_data(data: &VolumeData, out: &mut Vec<u8>) {
    match data {
        VolumeData::U8(v) => out.extend_from_slice(v),
        VolumeData::I16(v) => {
            let start = out.len();
            out.resize(start + 2 * v.len(), 0);
            LittleEndian::write_i16_into(v, &mut out[start..]);
        }
        VolumeData::I32(v) => {
            let start = out.len();
            out.resize(start + 4 * v.len(), 0);
            LittleEndian::write_i32_into(v, &mut out[start..]);
        }
        VolumeData::F32(v) => {
            let start = out.len();
            out.resize(start + 4 * v.len(), 0);
            LittleEndian::write_f32_into(v, &mut out[start..]);
        }
    }
}

fn write_bytes(path: &Path, header: &[u8], body: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let result = if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        enc.write_all(header)
            .and_then(|_| enc.write_all(body))
            .and_then(|_| enc.finish()?.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(header)
            .and_then(|_| w.write_all(body))
            .and_then(|_| w.flush())
    };
    result.map_err(|e| Error::io(path, e))
}

fn check_kind_datatype(kind: ElementKind, datatype: DataType) -> Result<()> {
    let ok = match kind {
        ElementKind::LabelId => matches!(datatype, DataType::U8 | DataType::I16 | DataType::I32),
        ElementKind::Probability | ElementKind::Uncertainty => datatype == DataType::F32,
        ElementKind::IntensityHu => matches!(datatype, DataType::I16 | DataType::F32),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::UnsupportedFormat(format!(
            "{} volumes cannot be stored as {datatype:?}",
            kind.tag()
        )))
    }
}

/// Writes a 3D volume. Label grids carry their class count in `intent_p1`
/// when given. Files ending in `.gz` are gzip-compressed.
pub fn write_volume(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    write_volume_with_classes(grid, None, path)
}

pub(crate) fn write_volume_with_classes(
    grid: &VoxelGrid,
    num_classes: Option<usize>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let datatype = DataType::of(grid.data());
    check_kind_datatype(grid.kind(), datatype)?;
    let header = encode_header(grid.geometry(), None, datatype, grid.kind(), num_classes)?;
    let mut body = Vec::with_capacity(grid.num_voxels() * datatype.bytes());
    encode_data(grid.data(), &mut body);
    write_bytes(path.as_ref(), &header, &body)
}

impl LabelMap {
    /// Writes the map with its class count recorded in the header.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_volume_with_classes(&self.to_grid(), Some(self.num_classes()), path)
    }
}

/// Writes class planes as a 4D float32 file (x, y, z, class).
pub fn write_probability_map(map: &DenseProbabilities, path: impl AsRef<Path>) -> Result<()> {
    let header = encode_header(
        map.geometry(),
        Some(map.num_classes()),
        DataType::F32,
        ElementKind::Probability,
        Some(map.num_classes()),
    )?;
    let mut body = Vec::with_capacity(map.planes().len() * 4);
    encode_data(&VolumeData::F32(map.planes().to_vec()), &mut body);
    write_bytes(path.as_ref(), &header, &body)
}
