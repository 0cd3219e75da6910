//! Procedural PET/CT phantoms standing in for clinical data.
//!
//! The generator encodes the physiology the discriminator relies on: FDG
//! phantoms carry a bright superior "brain" hotspot, PSMA phantoms have no
//! brain uptake but a bright pelvic "bladder".

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discriminator::{LabeledMip, Tracer};
use crate::preprocess::{tracer_mip, MipSpec, PreprocessError};
use crate::volume::{BinaryMask, Volume3D, VolumeError, VolumeKind};

/// CT values of the phantom tissues (HU).
pub const AIR_HU: f64 = -1000.0;
pub const SOFT_TISSUE_HU: f64 = 40.0;
pub const BONE_HU: f64 = 700.0;

/// Normalized ellipsoid radius band occupied by the bone shell.
const SHELL: (f64, f64) = (0.86, 0.94);
/// Hotspot profiles are evaluated out to this many half-max radii.
const PROFILE_EXTENT: f64 = 4.0;
/// Organ masks reach out to where uptake falls to 1/16 of the peak; lesion
/// masks stop at half-peak.
const ORGAN_EXTENT: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("hotspot {index} centered at {center:?} mm lies outside the volume extent {extent:?} mm")]
    HotspotOutOfBounds {
        index: usize,
        center: [f64; 3],
        extent: [f64; 3],
    },
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TracerStyle {
    FdgLike,
    PsmaLike,
}

impl TracerStyle {
    pub fn tracer(self) -> Tracer {
        match self {
            TracerStyle::FdgLike => Tracer::Fdg,
            TracerStyle::PsmaLike => Tracer::Psma,
        }
    }
}

/// Gaussian uptake blob. `radius_mm` is the half-maximum radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub center_mm: [f64; 3],
    pub radius_mm: f64,
    pub peak_suv: f64,
    /// Counts as lesion ground truth.
    pub lesion: bool,
    /// Organ name when the hotspot stands for physiological uptake.
    #[serde(default)]
    pub organ: Option<String>,
}

impl Hotspot {
    #[inline]
    fn profile(&self, d2: f64) -> f64 {
        self.peak_suv * (-std::f64::consts::LN_2 * d2 / (self.radius_mm * self.radius_mm)).exp()
    }
}

/// Body ellipsoid in physical mm relative to the first voxel center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    fn rho2(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| {
                let t = (p[a] - self.center_mm[a]) / self.semi_axes_mm[a];
                t * t
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub body: Ellipsoid,
    /// Uniform SUV inside the body.
    pub background_suv: f64,
    /// All hotspots, including the tracer-specific organ uptake.
    pub hotspots: Vec<Hotspot>,
    pub tracer_style: TracerStyle,
    pub noise_sigma: f64,
    pub seed: u64,
}

fn extent(shape: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| (shape[a] - 1) as f64 * spacing[a])
}

impl PhantomSpec {
    /// A phantom with no hotspots and no noise: constant uptake inside a
    /// centered body.
    pub fn blank(shape: [usize; 3], spacing: [f64; 3], style: TracerStyle, seed: u64) -> Self {
        let ext = extent(shape, spacing);
        Self {
            shape,
            spacing,
            body: Ellipsoid {
                center_mm: ext.map(|e| e / 2.0),
                semi_axes_mm: [ext[0] * 0.42, ext[1] * 0.40, ext[2] * 0.47],
            },
            background_suv: 1.0,
            hotspots: Vec::new(),
            tracer_style: style,
            noise_sigma: 0.0,
            seed,
        }
    }

    /// Randomized phantom of the given style: body proportions, background,
    /// the tracer's organ uptake and one to four lesions, all drawn from `seed`.
    pub fn random(shape: [usize; 3], spacing: [f64; 3], style: TracerStyle, seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let ext = extent(shape, spacing);
        let mut spec = Self::blank(shape, spacing, style, seed);
        spec.body.semi_axes_mm = [
            ext[0] * rng.random_range(0.34..0.45),
            ext[1] * rng.random_range(0.32..0.44),
            ext[2] * rng.random_range(0.44..0.48),
        ];
        spec.body.center_mm[0] += ext[0] * rng.random_range(-0.03..0.03);
        spec.background_suv = rng.random_range(0.5..1.5);
        spec.noise_sigma = rng.random_range(0.05..0.15);

        let b = spec.body.clone();
        let lateral = b.semi_axes_mm[0].min(b.semi_axes_mm[1]);
        match style {
            TracerStyle::FdgLike => spec.hotspots.push(Hotspot {
                center_mm: [b.center_mm[0], b.center_mm[1], b.center_mm[2] + 0.80 * b.semi_axes_mm[2]],
                radius_mm: (0.35 * lateral).min(0.12 * b.semi_axes_mm[2]),
                peak_suv: rng.random_range(8.0..12.0),
                lesion: false,
                organ: Some("brain".into()),
            }),
            TracerStyle::PsmaLike => spec.hotspots.push(Hotspot {
                center_mm: [b.center_mm[0], b.center_mm[1] + 0.15 * b.semi_axes_mm[1], b.center_mm[2] - 0.70 * b.semi_axes_mm[2]],
                radius_mm: (0.25 * lateral).min(0.10 * b.semi_axes_mm[2]),
                peak_suv: rng.random_range(8.0..14.0),
                lesion: false,
                organ: Some("urinary_bladder".into()),
            }),
        }
        let n_lesions = rng.random_range(1..=4);
        for _ in 0..n_lesions {
            let dir = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            spec.hotspots.push(Hotspot {
                center_mm: [
                    b.center_mm[0] + dir[0] * b.semi_axes_mm[0],
                    b.center_mm[1] + dir[1] * b.semi_axes_mm[1],
                    b.center_mm[2] + rng.random_range(-0.45..0.45) * b.semi_axes_mm[2],
                ],
                radius_mm: rng.random_range(1.5..3.0) * spacing.iter().cloned().fold(0.0, f64::max),
                peak_suv: rng.random_range(3.0..6.0),
                lesion: true,
                organ: None,
            });
        }
        spec
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.shape.contains(&0) || !self.spacing.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(SynthError::InvalidSpec(format!(
                "shape {:?} / spacing {:?}",
                self.shape, self.spacing
            )));
        }
        if !self.body.semi_axes_mm.iter().all(|a| *a > 0.0) {
            return Err(SynthError::InvalidSpec("body semi-axes must be positive".into()));
        }
        if !(self.background_suv >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(SynthError::InvalidSpec("background and noise must be nonnegative".into()));
        }
        let ext = extent(self.shape, self.spacing);
        for (index, h) in self.hotspots.iter().enumerate() {
            if !(h.radius_mm > 0.0 && h.peak_suv >= 0.0) {
                return Err(SynthError::InvalidSpec(format!("hotspot {index} radius/peak")));
            }
            if (0..3).any(|a| !(0.0..=ext[a]).contains(&h.center_mm[a])) {
                return Err(SynthError::HotspotOutOfBounds {
                    index,
                    center: h.center_mm,
                    extent: ext,
                });
            }
        }
        Ok(())
    }
}

/// Generated case with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub pet: Volume3D,
    pub ct: Volume3D,
    pub lesion_gt: BinaryMask,
    /// Organ masks by name (`skeleton` plus the tracer's uptake organ).
    pub organs: Vec<(String, BinaryMask)>,
}

/// Voxel index range covering `center ± reach` along one axis.
fn span(center: f64, reach: f64, spacing: f64, n: usize) -> std::ops::Range<usize> {
    let lo = ((center - reach) / spacing).floor().max(0.0) as usize;
    let hi = (((center + reach) / spacing).ceil() as usize + 1).min(n);
    lo.min(n)..hi
}

/// PET only, without allocating the CT and masks.
pub fn render_pet(spec: &PhantomSpec) -> Result<Volume3D, SynthError> {
    spec.validate()?;
    let [nx, ny, nz] = spec.shape;
    let s = spec.spacing;
    let mut data = vec![0.0; nx * ny * nz];
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).expect("valid sigma"))
    } else {
        None
    };
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    // background and noise, x-fastest so the noise stream is layout-stable
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64 * s[0], y as f64 * s[1], z as f64 * s[2]];
                if spec.body.rho2(p) <= 1.0 {
                    data[i] = spec.background_suv;
                    if let Some(n) = &noise {
                        data[i] += n.sample(&mut rng);
                    }
                }
                i += 1;
            }
        }
    }
    for h in &spec.hotspots {
        let reach = PROFILE_EXTENT * h.radius_mm;
        for z in span(h.center_mm[2], reach, s[2], nz) {
            let dz = z as f64 * s[2] - h.center_mm[2];
            for y in span(h.center_mm[1], reach, s[1], ny) {
                let dy = y as f64 * s[1] - h.center_mm[1];
                let row = (y + ny * z) * nx;
                for x in span(h.center_mm[0], reach, s[0], nx) {
                    let dx = x as f64 * s[0] - h.center_mm[0];
                    data[row + x] += h.profile(dx * dx + dy * dy + dz * dz);
                }
            }
        }
    }
    for v in &mut data {
        *v = v.max(0.0);
    }
    Ok(Volume3D::new(spec.shape, spec.spacing, VolumeKind::PetSuv, data)?)
}

fn hotspot_mask(spec: &PhantomSpec, scale: f64, keep: impl Fn(&Hotspot) -> bool) -> Vec<bool> {
    let [nx, ny, nz] = spec.shape;
    let s = spec.spacing;
    let mut bits = vec![false; nx * ny * nz];
    for h in spec.hotspots.iter().filter(|h| keep(h)) {
        let r = scale * h.radius_mm;
        let r2 = r * r;
        for z in span(h.center_mm[2], r, s[2], nz) {
            let dz = z as f64 * s[2] - h.center_mm[2];
            for y in span(h.center_mm[1], r, s[1], ny) {
                let dy = y as f64 * s[1] - h.center_mm[1];
                for x in span(h.center_mm[0], r, s[0], nx) {
                    let dx = x as f64 * s[0] - h.center_mm[0];
                    if dx * dx + dy * dy + dz * dz < r2 {
                        bits[x + nx * (y + ny * z)] = true;
                    }
                }
            }
        }
    }
    bits
}

/// Build PET, CT, lesion ground truth and organ masks for `spec`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom, SynthError> {
    let pet = render_pet(spec)?;
    let [nx, ny, nz] = spec.shape;
    let s = spec.spacing;
    let mut ct = Vec::with_capacity(nx * ny * nz);
    let mut skeleton = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let rho = spec.body.rho2([x as f64 * s[0], y as f64 * s[1], z as f64 * s[2]]).sqrt();
                let bone = (SHELL.0..SHELL.1).contains(&rho);
                skeleton.push(bone);
                ct.push(if rho > 1.0 {
                    AIR_HU
                } else if bone {
                    BONE_HU
                } else {
                    SOFT_TISSUE_HU
                });
            }
        }
    }
    let ct = Volume3D::new(spec.shape, spec.spacing, VolumeKind::CtHu, ct)?;
    let lesion_gt = BinaryMask::new(spec.shape, spec.spacing, hotspot_mask(spec, 1.0, |h| h.lesion))?;
    let mut organs = vec![("skeleton".to_string(), BinaryMask::new(spec.shape, spec.spacing, skeleton)?)];
    let mut names: Vec<&str> = spec.hotspots.iter().filter_map(|h| h.organ.as_deref()).collect();
    names.dedup();
    for name in names {
        let bits = hotspot_mask(spec, ORGAN_EXTENT, |h| h.organ.as_deref() == Some(name));
        organs.push((name.to_string(), BinaryMask::new(spec.shape, spec.spacing, bits)?));
    }
    Ok(Phantom {
        pet,
        ct,
        lesion_gt,
        organs,
    })
}

/// Grid of the phantoms behind [`make_mip_dataset`].
pub const DATASET_SHAPE: [usize; 3] = [64, 48, 96];
pub const DATASET_SPACING: [f64; 3] = [4.0, 4.0, 4.0];

/// Seed of item `index` in a corpus seeded with `seed`.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Style of item `index`: even indices FDG-like, odd PSMA-like.
pub fn item_style(index: usize) -> TracerStyle {
    if index.is_multiple_of(2) {
        TracerStyle::FdgLike
    } else {
        TracerStyle::PsmaLike
    }
}

pub fn item_spec(seed: u64, index: usize) -> PhantomSpec {
    PhantomSpec::random(DATASET_SHAPE, DATASET_SPACING, item_style(index), item_seed(seed, index))
}

/// `n` labeled MIPs, alternating FDG-like and PSMA-like, each rendered and
/// passed through the real discriminator preprocessing.
pub fn make_mip_dataset(n: usize, seed: u64) -> Result<Vec<LabeledMip>, SynthError> {
    if n < 2 {
        return Err(SynthError::InvalidSpec(format!("dataset needs at least 2 items, got {n}")));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let spec = item_spec(seed, i);
            let pet = render_pet(&spec)?;
            Ok(LabeledMip {
                image: tracer_mip(&pet, &MipSpec::default())?,
                tracer: spec.tracer_style.tracer(),
                case_id: format!("case_{i:04}"),
            })
        })
        .collect()
}
