//! Single-file NIfTI-1 (`.nii` / `.nii.gz`) reading and writing.
//!
//! Only the subset the pipeline needs: magic `n+1`, 3D (or 4D with a
//! singleton fourth axis) grids, datatypes uint8 / int16 / float32 / float64,
//! either byte order. Orientation beyond the voxel-center origin is ignored;
//! volumes are taken as axis-aligned in stored order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::volume::{Volume3D, VolumeError, VolumeKind};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";

const GZIP_PREFIX: [u8; 2] = [0x1f, 0x8b];
const MAX_INT16_LABEL: f64 = 32767.0;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("bad magic {0:?}: only single-file NIfTI-1 (\"n+1\") is supported")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("sizeof_hdr reads {le} (LE) / {be} (BE); neither is 348")]
    EndiannessUndetectable { le: i32, be: i32 },
    #[error("unsupported dimensions: {0}")]
    InvalidDim(String),
    #[error("pixdim {0:?} must be positive and finite on the three spatial axes")]
    InvalidSpacing([f32; 3]),
    #[error("truncated data: need {expected} bytes, found {got}")]
    TruncatedData { expected: usize, got: usize },
    #[error("gzip decompression failed: {0}")]
    DecompressFailure(String),
    #[error("label value {0} exceeds the int16 range")]
    LabelOverflow(f64),
    #[error("value {value} at voxel {index} is not representable as {datatype:?}")]
    NotRepresentable {
        datatype: Datatype,
        index: usize,
        value: f64,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl NiftiError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(i16)]
pub enum Datatype {
    Uint8 = 2,
    Int16 = 4,
    Float32 = 16,
    Float64 = 64,
}

impl Datatype {
    pub const ALL: [Datatype; 4] = [Self::Uint8, Self::Int16, Self::Float32, Self::Float64];

    pub fn from_code(code: i16) -> Result<Self, NiftiError> {
        match code {
            2 => Ok(Self::Uint8),
            4 => Ok(Self::Int16),
            16 => Ok(Self::Float32),
            64 => Ok(Self::Float64),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }

    pub fn code(self) -> i16 {
        self as i16
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Self::Uint8 => 1,
            Self::Int16 => 2,
            Self::Float32 => 4,
            Self::Float64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, Self::Uint8 | Self::Int16)
    }
}

/// Decoded NIfTI-1 header fields the pipeline uses.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub endian: Endian,
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub qform_code: i16,
    pub sform_code: i16,
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub descrip: String,
    pub magic: [u8; 4],
}

impl NiftiHeader {
    pub fn shape(&self) -> [usize; 3] {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }

    pub fn spacing(&self) -> [f64; 3] {
        [self.pixdim[1] as f64, self.pixdim[2] as f64, self.pixdim[3] as f64]
    }

    pub fn voxel_count(&self) -> usize {
        self.shape().iter().product()
    }

    /// Physical position of the first voxel center, from sform then qform.
    pub fn origin(&self) -> [f64; 3] {
        if self.sform_code > 0 {
            [self.srow[0][3] as f64, self.srow[1][3] as f64, self.srow[2][3] as f64]
        } else if self.qform_code > 0 {
            self.qoffset.map(|v| v as f64)
        } else {
            [0.0; 3]
        }
    }

    /// Whether `scl_slope`/`scl_inter` change the stored values.
    pub fn has_rescale(&self) -> bool {
        self.scl_slope != 0.0 && self.scl_slope.is_finite()
    }
}

struct Fields<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl Fields<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.buf[at], self.buf[at + 1]];
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }

    fn i32(&self, at: usize) -> i32 {
        let b = self.buf[at..at + 4].try_into().unwrap();
        match self.endian {
            Endian::Little => i32::from_le_bytes(b),
            Endian::Big => i32::from_be_bytes(b),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_bits(self.i32(at) as u32)
    }
}

/// Decode the 348-byte header, probing the byte order through `sizeof_hdr`.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::TruncatedData {
            expected: HEADER_SIZE,
            got: bytes.len(),
        });
    }
    let raw: [u8; 4] = bytes[0..4].try_into().unwrap();
    let le = i32::from_le_bytes(raw);
    let be = i32::from_be_bytes(raw);
    let endian = if le == HEADER_SIZE as i32 {
        Endian::Little
    } else if be == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(NiftiError::EndiannessUndetectable { le, be });
    };
    let f = Fields { buf: bytes, endian };

    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    if magic != MAGIC_SINGLE {
        return Err(NiftiError::BadMagic(magic));
    }
    let datatype = Datatype::from_code(f.i16(70))?;

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = f.i16(40 + 2 * i);
    }
    match dim[0] {
        3 => {}
        4 if dim[4] == 1 => {}
        4 => {
            return Err(NiftiError::InvalidDim(format!(
                "4D volume with {} frames; only a singleton fourth axis is accepted",
                dim[4]
            )))
        }
        n => return Err(NiftiError::InvalidDim(format!("rank {n}; expected 3"))),
    }
    if dim[1..=3].iter().any(|&d| d < 1) {
        return Err(NiftiError::InvalidDim(format!("axis sizes {:?}", &dim[1..=3])));
    }

    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = f.f32(76 + 4 * i);
    }
    let spatial = [pixdim[1], pixdim[2], pixdim[3]];
    if !spatial.iter().all(|p| p.is_finite() && *p > 0.0) {
        return Err(NiftiError::InvalidSpacing(spatial));
    }

    let vox_offset = f.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(NiftiError::InvalidDim(format!("vox_offset {vox_offset}")));
    }

    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = f.f32(280 + 16 * r + 4 * c);
        }
    }
    let descrip_raw = &bytes[148..228];
    let end = descrip_raw.iter().position(|&b| b == 0).unwrap_or(descrip_raw.len());

    Ok(NiftiHeader {
        endian,
        dim,
        datatype,
        bitpix: f.i16(72),
        pixdim,
        vox_offset,
        scl_slope: f.f32(112),
        scl_inter: f.f32(116),
        xyzt_units: bytes[123],
        qform_code: f.i16(252),
        sform_code: f.i16(254),
        qoffset: [f.f32(268), f.f32(272), f.f32(276)],
        srow,
        descrip: String::from_utf8_lossy(&descrip_raw[..end]).into_owned(),
        magic,
    })
}

fn maybe_decompress(bytes: Vec<u8>) -> Result<Vec<u8>, NiftiError> {
    if bytes.len() >= 2 && bytes[..2] == GZIP_PREFIX {
        let mut out = Vec::with_capacity(bytes.len() * 4);
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| NiftiError::DecompressFailure(e.to_string()))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Read a plain or gzip-compressed NIfTI file. Floating-point files default
/// to `PetSuv`, integer files to `Label`.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D, NiftiError> {
    read_volume_as(path, None)
}

/// Read with an explicit kind hint.
pub fn read_volume_as(path: impl AsRef<Path>, kind: Option<VolumeKind>) -> Result<Volume3D, NiftiError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| NiftiError::io(path, e))?;
    decode_volume(bytes, kind)
}

/// Read only the header (decompressing if needed).
pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeader, NiftiError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| NiftiError::io(path, e))?;
    parse_header(&maybe_decompress(bytes)?)
}

/// Decode an in-memory file image.
pub fn decode_volume(bytes: Vec<u8>, kind: Option<VolumeKind>) -> Result<Volume3D, NiftiError> {
    let bytes = maybe_decompress(bytes)?;
    let header = parse_header(&bytes)?;
    let n = header.voxel_count();
    let width = header.datatype.bytes_per_voxel();
    let start = header.vox_offset as usize;
    let expected = start + n * width;
    if bytes.len() < expected {
        return Err(NiftiError::TruncatedData {
            expected,
            got: bytes.len(),
        });
    }
    let payload = &bytes[start..expected];
    let mut data = decode_payload(payload, header.datatype, header.endian);
    if header.has_rescale() {
        let slope = header.scl_slope as f64;
        let inter = header.scl_inter as f64;
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    let kind = kind.unwrap_or(if header.datatype.is_integer() {
        VolumeKind::Label
    } else {
        VolumeKind::PetSuv
    });
    Ok(Volume3D::with_origin(
        header.shape(),
        header.spacing(),
        header.origin(),
        kind,
        data,
    )?)
}

fn decode_payload(payload: &[u8], datatype: Datatype, endian: Endian) -> Vec<f64> {
    macro_rules! decode {
        ($t:ty, $n:expr) => {
            payload
                .chunks_exact($n)
                .map(|c| {
                    let b: [u8; $n] = c.try_into().unwrap();
                    (match endian {
                        Endian::Little => <$t>::from_le_bytes(b),
                        Endian::Big => <$t>::from_be_bytes(b),
                    }) as f64
                })
                .collect()
        };
    }
    match datatype {
        Datatype::Uint8 => payload.iter().map(|&b| b as f64).collect(),
        Datatype::Int16 => decode!(i16, 2),
        Datatype::Float32 => decode!(f32, 4),
        Datatype::Float64 => decode!(f64, 8),
    }
}

/// How a volume is laid out on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOptions {
    /// `None` picks by kind: labels as uint8/int16, everything else float32.
    pub datatype: Option<Datatype>,
    pub endian: Endian,
    /// `None` compresses iff the path ends in `.gz`.
    pub gzip: Option<bool>,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self {
            datatype: None,
            endian: Endian::Little,
            gzip: None,
        }
    }
}

/// Datatype the default writer picks for `vol`.
pub fn default_datatype(vol: &Volume3D) -> Result<Datatype, NiftiError> {
    if vol.kind() != VolumeKind::Label {
        return Ok(Datatype::Float32);
    }
    let (_, max) = vol.min_max();
    if max <= 255.0 {
        Ok(Datatype::Uint8)
    } else if max <= MAX_INT16_LABEL {
        Ok(Datatype::Int16)
    } else {
        Err(NiftiError::LabelOverflow(max))
    }
}

pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    write_volume_with(vol, path, WriteOptions::default())
}

pub fn write_volume_with(vol: &Volume3D, path: impl AsRef<Path>, opts: WriteOptions) -> Result<(), NiftiError> {
    let path = path.as_ref();
    let gzip = opts
        .gzip
        .unwrap_or_else(|| path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz")));
    let bytes = encode_volume(vol, opts.datatype, opts.endian)?;
    let out = if gzip {
        let mut enc = GzEncoder::new(Vec::with_capacity(bytes.len() / 2), Compression::new(6));
        enc.write_all(&bytes).map_err(|e| NiftiError::io(path, e))?;
        enc.finish().map_err(|e| NiftiError::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, out).map_err(|e| NiftiError::io(path, e))
}

/// Serialize to an uncompressed file image.
pub fn encode_volume(vol: &Volume3D, datatype: Option<Datatype>, endian: Endian) -> Result<Vec<u8>, NiftiError> {
    let datatype = match datatype {
        Some(d) => d,
        None => default_datatype(vol)?,
    };
    let shape = vol.shape();
    for (axis, &n) in shape.iter().enumerate() {
        if n > i16::MAX as usize {
            return Err(NiftiError::InvalidDim(format!("axis {axis} has {n} voxels; NIfTI-1 caps at 32767")));
        }
    }
    let spacing = vol.spacing();
    let origin = vol.origin();
    let mut buf = vec![0u8; DEFAULT_VOX_OFFSET + vol.len() * datatype.bytes_per_voxel()];

    let put16 = |buf: &mut [u8], at: usize, v: i16| {
        let b = match endian {
            Endian::Little => v.to_le_bytes(),
            Endian::Big => v.to_be_bytes(),
        };
        buf[at..at + 2].copy_from_slice(&b);
    };
    let put32 = |buf: &mut [u8], at: usize, v: u32| {
        let b = match endian {
            Endian::Little => v.to_le_bytes(),
            Endian::Big => v.to_be_bytes(),
        };
        buf[at..at + 4].copy_from_slice(&b);
    };

    put32(&mut buf, 0, HEADER_SIZE as u32);
    buf[38] = b'r';
    let dim = [3i16, shape[0] as i16, shape[1] as i16, shape[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put16(&mut buf, 40 + 2 * i, *d);
    }
    put16(&mut buf, 70, datatype.code());
    put16(&mut buf, 72, (datatype.bytes_per_voxel() * 8) as i16);
    let pixdim = [1.0f32, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        put32(&mut buf, 76 + 4 * i, p.to_bits());
    }
    put32(&mut buf, 108, (DEFAULT_VOX_OFFSET as f32).to_bits());
    put32(&mut buf, 112, 1.0f32.to_bits());
    put32(&mut buf, 116, 0.0f32.to_bits());
    // mm + seconds
    buf[123] = 2 | 8;
    let descrip = b"tracerseg";
    buf[148..148 + descrip.len()].copy_from_slice(descrip);
    put16(&mut buf, 254, 1);
    for r in 0..3 {
        let mut row = [0f32; 4];
        row[r] = spacing[r] as f32;
        row[3] = origin[r] as f32;
        for (c, v) in row.iter().enumerate() {
            put32(&mut buf, 280 + 16 * r + 4 * c, v.to_bits());
        }
    }
    buf[344..348].copy_from_slice(&MAGIC_SINGLE);

    let payload = &mut buf[DEFAULT_VOX_OFFSET..];
    let data = vol.data();
    let not_repr = |index: usize| NiftiError::NotRepresentable {
        datatype,
        index,
        value: data[index],
    };
    match datatype {
        Datatype::Uint8 => {
            for (i, (&v, out)) in data.iter().zip(payload.iter_mut()).enumerate() {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(not_repr(i));
                }
                *out = v as u8;
            }
        }
        Datatype::Int16 => {
            for (i, (&v, out)) in data.iter().zip(payload.chunks_exact_mut(2)).enumerate() {
                if !(i16::MIN as f64..=i16::MAX as f64).contains(&v) || v.fract() != 0.0 {
                    return Err(not_repr(i));
                }
                let b = match endian {
                    Endian::Little => (v as i16).to_le_bytes(),
                    Endian::Big => (v as i16).to_be_bytes(),
                };
                out.copy_from_slice(&b);
            }
        }
        Datatype::Float32 => {
            for (&v, out) in data.iter().zip(payload.chunks_exact_mut(4)) {
                let b = match endian {
                    Endian::Little => (v as f32).to_le_bytes(),
                    Endian::Big => (v as f32).to_be_bytes(),
                };
                out.copy_from_slice(&b);
            }
        }
        Datatype::Float64 => {
            for (&v, out) in data.iter().zip(payload.chunks_exact_mut(8)) {
                let b = match endian {
                    Endian::Little => v.to_le_bytes(),
                    Endian::Big => v.to_be_bytes(),
                };
                out.copy_from_slice(&b);
            }
        }
    }
    Ok(buf)
}
