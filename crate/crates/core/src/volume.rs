//! Voxel grids shared by every stage of the pipeline.
//!
//! Axis convention: x = left-right, y = anterior-posterior, z = inferior-superior.
//! Linear order is x-fastest: `index = x + nx * (y + ny * z)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("data length {got} does not match shape {shape:?} ({expected} voxels)")]
    LengthMismatch {
        shape: [usize; 3],
        expected: usize,
        got: usize,
    },
    #[error("shape {0:?} has a zero-length axis")]
    EmptyAxis([usize; 3]),
    #[error("spacing {0:?} must be strictly positive and finite")]
    InvalidSpacing([f64; 3]),
    #[error("label volume holds {value} at voxel {index}; labels must be nonnegative integers")]
    InvalidLabel { index: usize, value: f64 },
    #[error("non-finite value {value} at voxel {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("shape or spacing mismatch: {0}")]
    ShapeMismatch(String),
}

/// What the scalars in a [`Volume3D`] mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VolumeKind {
    PetSuv,
    CtHu,
    Label,
    Probability,
}

impl std::str::FromStr for VolumeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pet" | "pet_suv" | "suv" => Ok(Self::PetSuv),
            "ct" | "ct_hu" | "hu" => Ok(Self::CtHu),
            "label" => Ok(Self::Label),
            "prob" | "probability" => Ok(Self::Probability),
            other => Err(format!("unknown volume kind '{other}'")),
        }
    }
}

/// A 3D scalar grid with per-axis spacing (mm) and the physical position of
/// the first voxel center. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    kind: VolumeKind,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(
        shape: [usize; 3],
        spacing: [f64; 3],
        kind: VolumeKind,
        data: Vec<f64>,
    ) -> Result<Self, VolumeError> {
        Self::with_origin(shape, spacing, [0.0; 3], kind, data)
    }

    pub fn with_origin(
        shape: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        kind: VolumeKind,
        data: Vec<f64>,
    ) -> Result<Self, VolumeError> {
        if shape.contains(&0) {
            return Err(VolumeError::EmptyAxis(shape));
        }
        if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(VolumeError::InvalidSpacing(spacing));
        }
        let expected = shape[0] * shape[1] * shape[2];
        if data.len() != expected {
            return Err(VolumeError::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(VolumeError::NonFinite { index, value });
        }
        if kind == VolumeKind::Label {
            if let Some((index, &value)) = data
                .iter()
                .enumerate()
                .find(|(_, v)| **v < 0.0 || v.fract() != 0.0 || **v > 9.0e15)
            {
                return Err(VolumeError::InvalidLabel { index, value });
            }
        }
        Ok(Self {
            shape,
            spacing,
            origin,
            kind,
            data,
        })
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], kind: VolumeKind, value: f64) -> Result<Self, VolumeError> {
        Self::new(shape, spacing, kind, vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    /// Same geometry and kind, new scalars.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, VolumeError> {
        Self::with_origin(self.shape, self.spacing, self.origin, self.kind, data)
    }

    /// Same geometry, new kind and scalars.
    pub fn derive(&self, kind: VolumeKind, data: Vec<f64>) -> Result<Self, VolumeError> {
        Self::with_origin(self.shape, self.spacing, self.origin, kind, data)
    }

    /// Reinterpret the scalars under a different kind, re-checking invariants.
    pub fn relabel(self, kind: VolumeKind) -> Result<Self, VolumeError> {
        Self::with_origin(self.shape, self.spacing, self.origin, kind, self.data)
    }

    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.shape == other.shape && self.spacing == other.spacing
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

pub(crate) fn check_same_grid(a: &Volume3D, b: &Volume3D, what: &str) -> Result<(), VolumeError> {
    if a.same_grid(b) {
        Ok(())
    } else {
        Err(VolumeError::ShapeMismatch(format!(
            "{what}: {:?} @ {:?} mm vs {:?} @ {:?} mm",
            a.shape, a.spacing, b.shape, b.spacing
        )))
    }
}

/// Binary foreground mask on a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    shape: [usize; 3],
    spacing: [f64; 3],
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], bits: Vec<bool>) -> Result<Self, VolumeError> {
        if shape.contains(&0) {
            return Err(VolumeError::EmptyAxis(shape));
        }
        if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(VolumeError::InvalidSpacing(spacing));
        }
        let expected = shape.iter().product();
        if bits.len() != expected {
            return Err(VolumeError::LengthMismatch {
                shape,
                expected,
                got: bits.len(),
            });
        }
        Ok(Self { shape, spacing, bits })
    }

    pub fn empty(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self, VolumeError> {
        Self::new(shape, spacing, vec![false; shape.iter().product()])
    }

    /// Voxels of `vol` equal to `label`.
    pub fn from_label(vol: &Volume3D, label: u32) -> Self {
        let target = label as f64;
        Self {
            shape: vol.shape,
            spacing: vol.spacing,
            bits: vol.data.iter().map(|&v| v == target).collect(),
        }
    }

    /// Voxels of `vol` that are nonzero.
    pub fn from_nonzero(vol: &Volume3D) -> Self {
        Self {
            shape: vol.shape,
            spacing: vol.spacing,
            bits: vol.data.iter().map(|&v| v != 0.0).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[x + self.shape[0] * (y + self.shape[1] * z)]
    }

    pub fn same_grid(&self, other: &BinaryMask) -> bool {
        self.shape == other.shape && self.spacing == other.spacing
    }

    /// 0/1 label volume.
    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            shape: self.shape,
            spacing: self.spacing,
            origin: [0.0; 3],
            kind: VolumeKind::Label,
            data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// A 2D float image indexed `(u, v)` with `u` fastest. For coronal
/// projections `u` is x (left-right) and `v` is z (inferior-superior).
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image2D {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, VolumeError> {
        if width == 0 || height == 0 {
            return Err(VolumeError::EmptyAxis([width, height, 1]));
        }
        if data.len() != width * height {
            return Err(VolumeError::LengthMismatch {
                shape: [width, height, 1],
                expected: width * height,
                got: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[u + self.width * v]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: f64) {
        self.data[u + self.width * v] = value;
    }
}
