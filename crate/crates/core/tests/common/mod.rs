#![allow(dead_code)]

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use tracerseg::metrics::Connectivity;
use tracerseg::nifti::Datatype;
use tracerseg::{BinaryMask, Volume3D, VolumeKind};

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn random_mask(rng: &mut Xoshiro256PlusPlus, shape: [usize; 3], density: f64) -> BinaryMask {
    let n = shape.iter().product();
    let bits = (0..n).map(|_| rng.random::<f64>() < density).collect();
    BinaryMask::new(shape, [1.0; 3], bits).unwrap()
}

fn neighbours(c: Connectivity) -> Vec<[i64; 3]> {
    let mut out = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let l1 = dx.abs() + dy.abs() + dz.abs();
                let ok = match c {
                    Connectivity::Six => l1 == 1,
                    Connectivity::Eighteen => l1 == 1 || l1 == 2,
                    Connectivity::TwentySix => l1 > 0,
                };
                if ok {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Breadth-first flood fill: component id per voxel (0 = background),
/// numbered in order of the first voxel met in x-fastest scan.
pub fn bfs_components(mask: &BinaryMask, c: Connectivity) -> (Vec<u32>, usize) {
    let [nx, ny, nz] = mask.shape();
    let offs = neighbours(c);
    let mut label = vec![0u32; nx * ny * nz];
    let mut next = 0u32;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.get(x, y, z) || label[idx(x, y, z)] != 0 {
                    continue;
                }
                next += 1;
                label[idx(x, y, z)] = next;
                let mut q = VecDeque::from([(x, y, z)]);
                while let Some((cx, cy, cz)) = q.pop_front() {
                    for d in &offs {
                        let (px, py, pz) = (cx as i64 + d[0], cy as i64 + d[1], cz as i64 + d[2]);
                        if px < 0 || py < 0 || pz < 0 || px >= nx as i64 || py >= ny as i64 || pz >= nz as i64 {
                            continue;
                        }
                        let (px, py, pz) = (px as usize, py as usize, pz as usize);
                        if mask.get(px, py, pz) && label[idx(px, py, pz)] == 0 {
                            label[idx(px, py, pz)] = next;
                            q.push_back((px, py, pz));
                        }
                    }
                }
            }
        }
    }
    (label, next as usize)
}

/// Sizes of components of `a` that share no voxel with `b`, summed.
pub fn brute_unmatched(a: &BinaryMask, b: &BinaryMask, c: Connectivity) -> usize {
    let (labels, k) = bfs_components(a, c);
    let mut total = 0;
    for id in 1..=k as u32 {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == id).collect();
        if !members.iter().any(|&i| b.bits()[i]) {
            total += members.len();
        }
    }
    total
}

pub fn direct_dice(a: &BinaryMask, b: &BinaryMask) -> Option<f64> {
    let p = a.bits().iter().filter(|&&v| v).count();
    let g = b.bits().iter().filter(|&&v| v).count();
    let both = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count();
    if p + g == 0 {
        None
    } else {
        Some(2.0 * both as f64 / (p + g) as f64)
    }
}

/// Random volume whose values survive `dt` exactly.
pub fn random_volume_for(rng: &mut Xoshiro256PlusPlus, dt: Datatype) -> Volume3D {
    let shape = [rng.random_range(1..=9), rng.random_range(1..=9), rng.random_range(1..=9)];
    let spacing = [
        rng.random_range(0.5f32..5.0) as f64,
        rng.random_range(0.5f32..5.0) as f64,
        rng.random_range(0.5f32..5.0) as f64,
    ];
    let n: usize = shape.iter().product();
    let (kind, data): (VolumeKind, Vec<f64>) = match dt {
        Datatype::Uint8 => (VolumeKind::Label, (0..n).map(|_| rng.random_range(0..=255u8) as f64).collect()),
        Datatype::Int16 => (VolumeKind::CtHu, (0..n).map(|_| rng.random::<i16>() as f64).collect()),
        Datatype::Float32 => (
            VolumeKind::PetSuv,
            (0..n).map(|_| rng.random_range(-1e6f32..1e6) as f64).collect(),
        ),
        Datatype::Float64 => (
            VolumeKind::PetSuv,
            (0..n).map(|_| rng.random_range(-1e12..1e12)).collect(),
        ),
    };
    Volume3D::new(shape, spacing, kind, data).unwrap()
}

/// Voxelwise bit equality of data plus equal grids.
pub fn bit_equal(a: &Volume3D, b: &Volume3D) -> bool {
    a.shape() == b.shape()
        && a.spacing() == b.spacing()
        && a.data().len() == b.data().len()
        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}
