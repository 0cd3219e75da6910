//! Resampling, intensity windowing, coronal MIP and the 224×224 extraction
//! that feeds the tracer discriminator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{check_same_grid, BinaryMask, Image2D, Volume3D, VolumeError, VolumeKind};

/// Discriminator input resolution (mm, isotropic).
pub const MIP_SPACING_MM: f64 = 3.0;
/// Side of the square discriminator input.
pub const MIP_SIZE: usize = 224;
/// SUV mapped to 1.0 when normalizing MIPs.
pub const MIP_CAP_SUV: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("target spacing {0:?} must be positive and finite")]
    InvalidSpacing([f64; 3]),
    #[error("window lower bound {lo} must be below upper bound {hi}")]
    InvalidWindow { lo: f64, hi: f64 },
    #[error("{op} does not accept {kind:?} volumes")]
    WrongKind { op: &'static str, kind: VolumeKind },
    #[error("image must be {expected}×{expected}, got {width}×{height}")]
    BadImageSize {
        expected: usize,
        width: usize,
        height: usize,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Intensity windows for the clipped channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowSpec {
    pub pet_lo: f64,
    pub pet_hi: f64,
    pub ct_lo: f64,
    pub ct_hi: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            pet_lo: 0.0,
            pet_hi: 20.0,
            ct_lo: -300.0,
            ct_hi: 400.0,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        for (lo, hi) in [(self.pet_lo, self.pet_hi), (self.ct_lo, self.ct_hi)] {
            if !(lo < hi) {
                return Err(PreprocessError::InvalidWindow { lo, hi });
            }
        }
        Ok(())
    }
}

/// Channel order of [`ChannelStack`].
pub const CHANNEL_NAMES: [&str; 4] = ["ct", "pet", "ct_clipped", "pet_clipped"];

/// The four-channel segmentation input: raw CT, raw PET, windowed CT,
/// windowed PET, all on one grid.
///
/// `exclusion` optionally carries an organ mask on the same grid; in-process
/// predictors may use it and it follows the channels through flips.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    channels: [Volume3D; 4],
    exclusion: Option<BinaryMask>,
}

impl ChannelStack {
    pub fn from_channels(channels: [Volume3D; 4]) -> Result<Self, PreprocessError> {
        for c in &channels[1..] {
            check_same_grid(&channels[0], c, "channel stack")?;
        }
        Ok(Self {
            channels,
            exclusion: None,
        })
    }

    pub fn with_exclusion(mut self, mask: BinaryMask) -> Result<Self, PreprocessError> {
        if mask.shape() != self.shape() || mask.spacing() != self.spacing() {
            return Err(VolumeError::ShapeMismatch(format!(
                "exclusion mask {:?} vs stack {:?}",
                mask.shape(),
                self.shape()
            ))
            .into());
        }
        self.exclusion = Some(mask);
        Ok(self)
    }

    pub fn channels(&self) -> &[Volume3D; 4] {
        &self.channels
    }

    pub fn ct(&self) -> &Volume3D {
        &self.channels[0]
    }

    pub fn pet(&self) -> &Volume3D {
        &self.channels[1]
    }

    pub fn ct_clipped(&self) -> &Volume3D {
        &self.channels[2]
    }

    pub fn pet_clipped(&self) -> &Volume3D {
        &self.channels[3]
    }

    pub fn exclusion(&self) -> Option<&BinaryMask> {
        self.exclusion.as_ref()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.channels[0].shape()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.channels[0].spacing()
    }

    pub fn voxel_count(&self) -> usize {
        self.channels[0].len()
    }

    pub fn into_parts(self) -> ([Volume3D; 4], Option<BinaryMask>) {
        (self.channels, self.exclusion)
    }
}

/// Output grid size along one axis.
pub fn resampled_len(n: usize, source: f64, target: f64) -> usize {
    ((n as f64 * source / target).round() as usize).max(1)
}

/// Continuous source index sampled by output index `i`, before clamping.
/// Voxel-center aligned: physical `(i + ½)·t − ½·s` from the first source center.
#[inline]
pub fn source_coordinate(i: usize, source: f64, target: f64) -> f64 {
    (i as f64 + 0.5) * (target / source) - 0.5
}

#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w: f64,
}

fn linear_taps(n_in: usize, n_out: usize, source: f64, target: f64) -> Vec<Tap> {
    let last = (n_in - 1) as f64;
    (0..n_out)
        .map(|i| {
            let u = source_coordinate(i, source, target).clamp(0.0, last);
            let lo = (u.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            Tap { lo, hi, w: u - lo as f64 }
        })
        .collect()
}

fn nearest_taps(n_in: usize, n_out: usize, source: f64, target: f64) -> Vec<usize> {
    let last = (n_in - 1) as f64;
    (0..n_out)
        .map(|i| {
            let u = source_coordinate(i, source, target).clamp(0.0, last);
            // round half toward the lower index
            ((u - 0.5).ceil().max(0.0) as usize).min(n_in - 1)
        })
        .collect()
}

fn check_target(target: [f64; 3]) -> Result<(), PreprocessError> {
    if target.iter().all(|t| t.is_finite() && *t > 0.0) {
        Ok(())
    } else {
        Err(PreprocessError::InvalidSpacing(target))
    }
}

fn output_geometry(vol: &Volume3D, target: [f64; 3]) -> ([usize; 3], [f64; 3]) {
    let shape = vol.shape();
    let spacing = vol.spacing();
    let origin = vol.origin();
    let mut out_shape = [0; 3];
    let mut out_origin = [0.0; 3];
    for a in 0..3 {
        out_shape[a] = resampled_len(shape[a], spacing[a], target[a]);
        out_origin[a] = origin[a] + 0.5 * target[a] - 0.5 * spacing[a];
    }
    (out_shape, out_origin)
}

/// Trilinear resampling onto an isotropic or anisotropic `target` grid.
/// Samples outside the source clamp to the border voxel.
pub fn resample_trilinear(vol: &Volume3D, target: [f64; 3]) -> Result<Volume3D, PreprocessError> {
    if vol.kind() == VolumeKind::Label {
        return Err(PreprocessError::WrongKind {
            op: "resample_trilinear",
            kind: vol.kind(),
        });
    }
    check_target(target)?;
    if target == vol.spacing() {
        return Ok(vol.clone());
    }
    let [nx, ny, nz] = vol.shape();
    let s = vol.spacing();
    let (out_shape, out_origin) = output_geometry(vol, target);
    let [ox, oy, oz] = out_shape;
    let tx = linear_taps(nx, ox, s[0], target[0]);
    let ty = linear_taps(ny, oy, s[1], target[1]);
    let tz = linear_taps(nz, oz, s[2], target[2]);
    let src = vol.data();
    let plane = nx * ny;

    let mut out = vec![0.0; ox * oy * oz];
    out.par_chunks_mut(ox * oy).zip(tz.par_iter()).for_each(|(slab, z)| {
        let z0 = &src[z.lo * plane..(z.lo + 1) * plane];
        let z1 = &src[z.hi * plane..(z.hi + 1) * plane];
        for (row, y) in slab.chunks_exact_mut(ox).zip(&ty) {
            let r00 = &z0[y.lo * nx..(y.lo + 1) * nx];
            let r10 = &z0[y.hi * nx..(y.hi + 1) * nx];
            let r01 = &z1[y.lo * nx..(y.lo + 1) * nx];
            let r11 = &z1[y.hi * nx..(y.hi + 1) * nx];
            for (o, x) in row.iter_mut().zip(&tx) {
                let lerp_x = |r: &[f64]| r[x.lo] + x.w * (r[x.hi] - r[x.lo]);
                let a = lerp_x(r00);
                let b = lerp_x(r10);
                let c = lerp_x(r01);
                let d = lerp_x(r11);
                let ab = a + y.w * (b - a);
                let cd = c + y.w * (d - c);
                *o = ab + z.w * (cd - ab);
            }
        }
    });
    Ok(Volume3D::with_origin(out_shape, target, out_origin, vol.kind(), out)?)
}

/// Nearest-neighbour resampling for label maps; exact midpoints take the
/// lower index.
pub fn resample_nearest(vol: &Volume3D, target: [f64; 3]) -> Result<Volume3D, PreprocessError> {
    if vol.kind() != VolumeKind::Label {
        return Err(PreprocessError::WrongKind {
            op: "resample_nearest",
            kind: vol.kind(),
        });
    }
    check_target(target)?;
    if target == vol.spacing() {
        return Ok(vol.clone());
    }
    let [nx, ny, nz] = vol.shape();
    let s = vol.spacing();
    let (out_shape, out_origin) = output_geometry(vol, target);
    let [ox, oy, oz] = out_shape;
    let ix = nearest_taps(nx, ox, s[0], target[0]);
    let iy = nearest_taps(ny, oy, s[1], target[1]);
    let iz = nearest_taps(nz, oz, s[2], target[2]);
    let src = vol.data();
    let mut out = Vec::with_capacity(ox * oy * oz);
    for &z in &iz {
        for &y in &iy {
            let row = &src[(y + ny * z) * nx..(y + ny * z + 1) * nx];
            out.extend(ix.iter().map(|&x| row[x]));
        }
    }
    Ok(Volume3D::with_origin(out_shape, target, out_origin, vol.kind(), out)?)
}

/// Clamp every voxel into `[lo, hi]`.
pub fn clip_intensity(vol: &Volume3D, lo: f64, hi: f64) -> Result<Volume3D, PreprocessError> {
    if !(lo < hi) {
        return Err(PreprocessError::InvalidWindow { lo, hi });
    }
    let data = vol.data().iter().map(|&v| v.max(lo).min(hi)).collect();
    Ok(vol.with_data(data)?)
}

/// `[ct, pet, clip(ct), clip(pet)]`.
pub fn build_channels(ct: &Volume3D, pet: &Volume3D, window: &WindowSpec) -> Result<ChannelStack, PreprocessError> {
    window.validate()?;
    check_same_grid(ct, pet, "ct/pet")?;
    let ct_clipped = clip_intensity(ct, window.ct_lo, window.ct_hi)?;
    let pet_clipped = clip_intensity(pet, window.pet_lo, window.pet_hi)?;
    ChannelStack::from_channels([ct.clone(), pet.clone(), ct_clipped, pet_clipped])
}

/// Maximum over the anterior-posterior (y) axis. Output is `nx × nz`.
pub fn mip_coronal(vol: &Volume3D) -> Image2D {
    let [nx, ny, nz] = vol.shape();
    let src = vol.data();
    let mut out = vec![f64::NEG_INFINITY; nx * nz];
    for z in 0..nz {
        let acc = &mut out[z * nx..(z + 1) * nx];
        for y in 0..ny {
            let row = &src[(y + ny * z) * nx..(y + ny * z + 1) * nx];
            for (m, &v) in acc.iter_mut().zip(row) {
                if v > *m {
                    *m = v;
                }
            }
        }
    }
    Image2D::new(nx, nz, out).expect("projection of a valid volume")
}

/// Offset that places input index `⌊n/2⌋` at output index `⌊size/2⌋`.
#[inline]
pub fn center_offset(n: usize, size: usize) -> isize {
    (size / 2) as isize - (n / 2) as isize
}

/// Center-aligned zero pad / crop to `size × size`.
pub fn crop_pad_center(img: &Image2D, size: usize) -> Image2D {
    let (w, h) = (img.width(), img.height());
    let du = center_offset(w, size);
    let dv = center_offset(h, size);
    let mut out = Image2D::zeros(size, size);
    for v in 0..size {
        let sv = v as isize - dv;
        if sv < 0 || sv >= h as isize {
            continue;
        }
        for u in 0..size {
            let su = u as isize - du;
            if su >= 0 && su < w as isize {
                out.set(u, v, img.get(su as usize, sv as usize));
            }
        }
    }
    out
}

/// A 224×224 coronal projection ready for (or already passed through)
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct MipImage {
    pixels: Image2D,
    source_spacing: [f64; 2],
}

impl MipImage {
    pub fn new(pixels: Image2D, source_spacing: [f64; 2]) -> Result<Self, PreprocessError> {
        if pixels.width() != MIP_SIZE || pixels.height() != MIP_SIZE {
            return Err(PreprocessError::BadImageSize {
                expected: MIP_SIZE,
                width: pixels.width(),
                height: pixels.height(),
            });
        }
        Ok(Self { pixels, source_spacing })
    }

    pub fn pixels(&self) -> &Image2D {
        &self.pixels
    }

    pub fn source_spacing(&self) -> [f64; 2] {
        self.source_spacing
    }
}

/// `min(max(v, 0), cap) / cap`.
pub fn normalize_mip(mip: &MipImage, cap: f64) -> MipImage {
    let data = mip.pixels.data().iter().map(|&v| v.clamp(0.0, cap) / cap).collect();
    MipImage {
        pixels: Image2D::new(MIP_SIZE, MIP_SIZE, data).unwrap(),
        source_spacing: mip.source_spacing,
    }
}

/// Parameters of the discriminator preprocessing chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MipSpec {
    pub spacing_mm: f64,
    pub cap_suv: f64,
}

impl Default for MipSpec {
    fn default() -> Self {
        Self {
            spacing_mm: MIP_SPACING_MM,
            cap_suv: MIP_CAP_SUV,
        }
    }
}

/// PET → isotropic resample → coronal MIP → 224×224 center window → [0, 1].
pub fn tracer_mip(pet: &Volume3D, spec: &MipSpec) -> Result<MipImage, PreprocessError> {
    if pet.kind() != VolumeKind::PetSuv {
        return Err(PreprocessError::WrongKind {
            op: "tracer_mip",
            kind: pet.kind(),
        });
    }
    let t = spec.spacing_mm;
    let resampled = resample_trilinear(pet, [t, t, t])?;
    let projection = mip_coronal(&resampled);
    let padded = MipImage::new(crop_pad_center(&projection, MIP_SIZE), [t, t])?;
    Ok(normalize_mip(&padded, spec.cap_suv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(shape: [usize; 3], spacing: [f64; 3], kind: VolumeKind, f: impl Fn(usize, usize, usize) -> f64) -> Volume3D {
        let mut data = Vec::new();
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume3D::new(shape, spacing, kind, data).unwrap()
    }

    #[test]
    fn constant_survives_resampling() {
        let v = Volume3D::filled([5, 6, 7], [2.0, 1.5, 3.0], VolumeKind::PetSuv, 7.3).unwrap();
        let r = resample_trilinear(&v, [3.3, 3.3, 3.3]).unwrap();
        assert_eq!(r.shape(), [3, 3, 6]);
        assert!(r.data().iter().all(|&x| (x - 7.3).abs() < 1e-12));
    }

    #[test]
    fn ramp_upsampling_is_linear() {
        let v = vol([6, 1, 1], [2.0, 1.0, 1.0], VolumeKind::CtHu, |x, _, _| x as f64);
        let r = resample_trilinear(&v, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.shape(), [12, 1, 1]);
        // output i sits at source index (i + 0.5)/2 - 0.5; interior 1..=10
        for i in 1..=10 {
            let expect = (i as f64 + 0.5) / 2.0 - 0.5;
            assert!((r.data()[i] - expect).abs() < 1e-12, "i={i}");
        }
        // border clamps
        assert_eq!(r.data()[0], 0.0);
        assert_eq!(r.data()[11], 5.0);
    }

    #[test]
    fn nearest_midpoint_takes_lower_index() {
        let v = Volume3D::new([2, 1, 1], [1.0; 3], VolumeKind::Label, vec![5.0, 9.0]).unwrap();
        let r = resample_nearest(&v, [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.shape(), [1, 1, 1]);
        assert_eq!(r.data(), &[5.0]);
    }

    #[test]
    fn kind_gates() {
        let label = Volume3D::filled([2, 2, 2], [1.0; 3], VolumeKind::Label, 1.0).unwrap();
        assert!(matches!(
            resample_trilinear(&label, [2.0; 3]),
            Err(PreprocessError::WrongKind { .. })
        ));
        let pet = Volume3D::filled([2, 2, 2], [1.0; 3], VolumeKind::PetSuv, 1.0).unwrap();
        assert!(matches!(
            resample_nearest(&pet, [2.0; 3]),
            Err(PreprocessError::WrongKind { .. })
        ));
        assert!(matches!(
            resample_trilinear(&pet, [0.0, 1.0, 1.0]),
            Err(PreprocessError::InvalidSpacing(_))
        ));
    }

    #[test]
    fn clip_examples() {
        let pet = Volume3D::new([3, 1, 1], [1.0; 3], VolumeKind::PetSuv, vec![25.0, 5.0, -0.5]).unwrap();
        let c = clip_intensity(&pet, 0.0, 20.0).unwrap();
        assert_eq!(c.data(), &[20.0, 5.0, 0.0]);
        let ct = Volume3D::new([1, 1, 1], [1.0; 3], VolumeKind::CtHu, vec![-1000.0]).unwrap();
        assert_eq!(clip_intensity(&ct, -300.0, 400.0).unwrap().data(), &[-300.0]);
        assert!(matches!(
            clip_intensity(&ct, 1.0, 1.0),
            Err(PreprocessError::InvalidWindow { .. })
        ));
    }

    #[test]
    fn channels() {
        let ct = Volume3D::filled([4, 4, 4], [1.0; 3], VolumeKind::CtHu, 0.0).unwrap();
        let pet = Volume3D::filled([4, 4, 4], [1.0; 3], VolumeKind::PetSuv, 0.0).unwrap();
        let s = build_channels(&ct, &pet, &WindowSpec::default()).unwrap();
        assert!(s.ct_clipped().data().iter().all(|&v| v == 0.0));
        assert!(s.pet_clipped().data().iter().all(|&v| v == 0.0));
        let bad = Volume3D::filled([4, 4, 5], [1.0; 3], VolumeKind::PetSuv, 0.0).unwrap();
        assert!(matches!(
            build_channels(&ct, &bad, &WindowSpec::default()),
            Err(PreprocessError::Volume(VolumeError::ShapeMismatch(_)))
        ));
    }

    #[test]
    fn single_voxel_mip() {
        let v = vol([4, 6, 5], [1.0; 3], VolumeKind::PetSuv, |x, y, z| {
            if (x, y, z) == (2, 5, 3) {
                4.5
            } else {
                0.0
            }
        });
        let m = mip_coronal(&v);
        assert_eq!((m.width(), m.height()), (4, 5));
        for zz in 0..5 {
            for xx in 0..4 {
                let expect = if (xx, zz) == (2, 3) { 4.5 } else { 0.0 };
                assert_eq!(m.get(xx, zz), expect);
            }
        }
    }

    #[test]
    fn pad_offsets_both_parities() {
        let img = Image2D::new(100, 150, vec![1.0; 100 * 150]).unwrap();
        let out = crop_pad_center(&img, 224);
        for v in 0..224 {
            for u in 0..224 {
                let inside = (62..=161).contains(&u) && (37..=186).contains(&v);
                assert_eq!(out.get(u, v), if inside { 1.0 } else { 0.0 }, "({u},{v})");
            }
        }
        // odd widths: input center ⌊n/2⌋ lands on 112
        let data: Vec<f64> = (0..101 * 3).map(|i| (i % 101) as f64).collect();
        let out = crop_pad_center(&Image2D::new(101, 3, data).unwrap(), 224);
        assert_eq!(out.get(112, 112), 50.0);
        assert_eq!(out.get(62, 112), 0.0);
        assert_eq!(out.get(162, 112), 100.0);
    }

    #[test]
    fn pad_identity_and_crop() {
        let data: Vec<f64> = (0..224 * 224).map(|i| i as f64).collect();
        let img = Image2D::new(224, 224, data).unwrap();
        assert_eq!(crop_pad_center(&img, 224), img);
        let big = Image2D::new(300, 300, vec![1.0; 90000]).unwrap();
        assert!(crop_pad_center(&big, 224).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalize_examples() {
        let mut img = Image2D::zeros(224, 224);
        img.set(0, 0, 20.0);
        img.set(1, 0, 40.0);
        let m = normalize_mip(&MipImage::new(img, [3.0, 3.0]).unwrap(), 20.0);
        assert_eq!(m.pixels().get(0, 0), 1.0);
        assert_eq!(m.pixels().get(1, 0), 1.0);
        assert_eq!(m.pixels().get(2, 0), 0.0);
    }

    #[test]
    fn tracer_mip_shape_and_range() {
        let pet = vol([40, 30, 50], [4.0, 4.0, 4.0], VolumeKind::PetSuv, |x, y, z| {
            (x + y + z) as f64 * 0.3
        });
        let m = tracer_mip(&pet, &MipSpec::default()).unwrap();
        assert_eq!(m.pixels().width(), 224);
        assert!(m.pixels().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
