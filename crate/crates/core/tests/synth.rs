mod common;

use tracerseg::discriminator::Tracer;
use tracerseg::nifti::{decode_volume, encode_volume, Datatype, Endian};
use tracerseg::preprocess::{mip_coronal, MIP_SIZE};
use tracerseg::synth::{
    make_mip_dataset, make_phantom, Hotspot, PhantomSpec, SynthError, TracerStyle, AIR_HU, BONE_HU, DATASET_SHAPE,
    DATASET_SPACING, SOFT_TISSUE_HU,
};

use common::bit_equal;

fn argmax_row(img: &tracerseg::Image2D) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for v in 0..img.height() {
        for u in 0..img.width() {
            if img.get(u, v) > best.0 {
                best = (img.get(u, v), v);
            }
        }
    }
    best.1
}

#[test]
fn fdg_maximum_sits_in_top_rows() {
    for seed in 0..20 {
        let spec = PhantomSpec::random(DATASET_SHAPE, DATASET_SPACING, TracerStyle::FdgLike, seed);
        let p = make_phantom(&spec).unwrap();
        let mip = mip_coronal(&p.pet);
        let nz = mip.height();
        // rows run along z; superior is the high-z end
        assert!(argmax_row(&mip) as f64 >= 0.8 * nz as f64, "seed {seed}");
    }
}

#[test]
fn psma_has_no_superior_hotspot() {
    for seed in 0..20 {
        let spec = PhantomSpec::random(DATASET_SHAPE, DATASET_SPACING, TracerStyle::PsmaLike, seed);
        let nz = DATASET_SHAPE[2] as f64 * DATASET_SPACING[2];
        assert!(spec.hotspots.iter().all(|h| h.lesion || h.center_mm[2] < 0.5 * nz));
        let p = make_phantom(&spec).unwrap();
        assert!((argmax_row(&mip_coronal(&p.pet)) as f64) < 0.8 * DATASET_SHAPE[2] as f64);
    }
}

#[test]
fn phantom_invariants() {
    let spec = PhantomSpec::random([40, 32, 48], [3.0; 3], TracerStyle::PsmaLike, 5);
    let p = make_phantom(&spec).unwrap();
    assert!(p.pet.data().iter().all(|&v| v >= 0.0));
    assert!(p.ct.data().iter().all(|&v| v == AIR_HU || v == SOFT_TISSUE_HU || v == BONE_HU));
    assert!(p.lesion_gt.count() > 0);
    assert_eq!(make_phantom(&spec).unwrap(), p);
    let other = make_phantom(&PhantomSpec::random([40, 32, 48], [3.0; 3], TracerStyle::PsmaLike, 6)).unwrap();
    assert_ne!(other.pet, p.pet);
}

#[test]
fn blank_phantom_and_bounds() {
    let spec = PhantomSpec::blank([12, 10, 14], [2.0; 3], TracerStyle::FdgLike, 0);
    let p = make_phantom(&spec).unwrap();
    assert_eq!(p.lesion_gt.count(), 0);
    let inside: Vec<f64> = p
        .pet
        .data()
        .iter()
        .zip(p.ct.data())
        .filter(|(_, &c)| c != AIR_HU)
        .map(|(&v, _)| v)
        .collect();
    assert!(!inside.is_empty() && inside.iter().all(|&v| v == spec.background_suv));

    let mut bad = spec.clone();
    bad.hotspots.push(Hotspot {
        center_mm: [0.0, 0.0, 100.0],
        radius_mm: 2.0,
        peak_suv: 5.0,
        lesion: true,
        organ: None,
    });
    assert!(matches!(make_phantom(&bad), Err(SynthError::HotspotOutOfBounds { index: 0, .. })));
}

#[test]
fn volumes_survive_nifti() {
    let p = make_phantom(&PhantomSpec::random([20, 16, 24], [4.0; 3], TracerStyle::FdgLike, 9)).unwrap();
    for (v, dt) in [(&p.pet, Datatype::Float64), (&p.ct, Datatype::Int16), (&p.lesion_gt.to_volume(), Datatype::Uint8)] {
        let back = decode_volume(encode_volume(v, Some(dt), Endian::Little).unwrap(), Some(v.kind())).unwrap();
        assert!(bit_equal(v, &back));
    }
}

/// Two features per image: mean of the upper half of rows and of the lower half.
fn features(img: &tracerseg::Image2D) -> [f64; 2] {
    let h = img.height();
    let mut top = 0.0;
    let mut rest = 0.0;
    for v in 0..h {
        let row: f64 = (0..img.width()).map(|u| img.get(u, v)).sum();
        if v >= h / 2 {
            top += row;
        } else {
            rest += row;
        }
    }
    let n = (img.width() * h / 2) as f64;
    [top / n, rest / n]
}

#[test]
fn dataset_balance_size_and_linear_probe() {
    let data = make_mip_dataset(200, 42).unwrap();
    let fdg = data.iter().filter(|m| m.tracer == Tracer::Fdg).count();
    assert_eq!((fdg, data.len() - fdg), (100, 100));
    assert!(data
        .iter()
        .all(|m| m.image.pixels().width() == MIP_SIZE && m.image.pixels().height() == MIP_SIZE));
    assert_eq!(make_mip_dataset(4, 42).unwrap()[..], data[..4]);

    // logistic regression on standardized features, trained on even cases, scored on odd
    let xs: Vec<[f64; 2]> = data.iter().map(|m| features(m.image.pixels())).collect();
    let ys: Vec<f64> = data.iter().map(|m| m.tracer.label() as f64).collect();
    let mean = [0, 1].map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / xs.len() as f64);
    let sd = [0, 1].map(|j| (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / xs.len() as f64).sqrt());
    let z: Vec<[f64; 2]> = xs.iter().map(|x| [0, 1].map(|j| (x[j] - mean[j]) / sd[j])).collect();
    let (train, test): (Vec<usize>, Vec<usize>) = (0..z.len()).partition(|i| (i / 2) % 2 == 0);
    let mut w = [0.0; 3];
    for _ in 0..2000 {
        let mut g = [0.0; 3];
        for &i in &train {
            let p = 1.0 / (1.0 + (-(w[0] * z[i][0] + w[1] * z[i][1] + w[2])).exp());
            let e = p - ys[i];
            g[0] += e * z[i][0];
            g[1] += e * z[i][1];
            g[2] += e;
        }
        for j in 0..3 {
            w[j] -= 0.5 * g[j] / train.len() as f64;
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| ((w[0] * z[i][0] + w[1] * z[i][1] + w[2] > 0.0) as u8 as f64) == ys[i])
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.95, "probe accuracy {acc}");
}
