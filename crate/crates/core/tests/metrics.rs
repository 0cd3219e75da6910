mod common;

use rand::Rng;
use tracerseg::metrics::{
    case_metrics, connected_components, dice, evaluate_case, false_negative_volume, false_positive_volume,
    label_components, metrics_csv, Connectivity, CSV_HEADER,
};
use tracerseg::nifti::write_volume;
use tracerseg::BinaryMask;

use common::{bfs_components, brute_unmatched, direct_dice, random_mask, rng};

const ALL: [Connectivity; 3] = [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix];

#[test]
fn labels_match_flood_fill() {
    let mut r = rng(20);
    for i in 0..50 {
        let density = r.random_range(0.0..0.5);
        let m = random_mask(&mut r, [12, 12, 12], density);
        for c in ALL {
            let (oracle, k) = bfs_components(&m, c);
            let cc = label_components(&m, c);
            assert_eq!(cc.count, k, "mask {i} {c}");
            assert_eq!(cc.labels, oracle, "mask {i} {c}");
        }
    }
}

#[test]
fn unmatched_volumes_match_brute_force() {
    let mut r = rng(21);
    for _ in 0..30 {
        let (dp, dg) = (r.random_range(0.0..0.3), r.random_range(0.0..0.3));
        let p = random_mask(&mut r, [10, 9, 8], dp);
        let g = random_mask(&mut r, [10, 9, 8], dg);
        for c in ALL {
            let fp = false_positive_volume(&p, &g, c).unwrap();
            let fn_ = false_negative_volume(&p, &g, c).unwrap();
            assert_eq!(fp.voxels, brute_unmatched(&p, &g, c));
            assert_eq!(fn_.voxels, brute_unmatched(&g, &p, c));
            // swapping roles swaps the two volumes
            assert_eq!(false_negative_volume(&g, &p, c).unwrap(), fp);
            assert!(fp.voxels <= p.count() && fn_.voxels <= g.count());
        }
        let d = dice(&p, &g).unwrap();
        assert_eq!(d, direct_dice(&p, &g));
        if let Some(d) = d {
            assert!((0.0..=1.0).contains(&d));
        }
    }
}

#[test]
fn adding_isolated_component_grows_fpv_by_its_size() {
    let mut r = rng(22);
    let mut p = random_mask(&mut r, [12, 12, 12], 0.0);
    let g = p.clone();
    let before = false_positive_volume(&p, &g, Connectivity::TwentySix).unwrap().voxels;
    let mut bits = p.bits().to_vec();
    // 2x2x1 block well away from everything
    for (x, y) in [(5, 5), (6, 5), (5, 6), (6, 6)] {
        bits[x + 12 * (y + 12 * 5)] = true;
    }
    p = BinaryMask::new([12; 3], [1.0; 3], bits).unwrap();
    let after = false_positive_volume(&p, &g, Connectivity::TwentySix).unwrap().voxels;
    assert_eq!(after, before + 4);
}

#[test]
fn hand_built_fixture() {
    let idx = |x: usize, y: usize, z: usize| x + 8 * (y + 8 * z);
    let mut p = vec![false; 512];
    let mut g = vec![false; 512];
    // shared lesion: 2x2x2 at origin, prediction covers half of it
    for z in 0..2 {
        for y in 0..2 {
            for x in 0..2 {
                g[idx(x, y, z)] = true;
                if z == 0 {
                    p[idx(x, y, z)] = true;
                }
            }
        }
    }
    // missed lesion: single voxel
    g[idx(7, 7, 7)] = true;
    // spurious prediction: 3-voxel line
    for x in 4..7 {
        p[idx(x, 4, 4)] = true;
    }
    // diagonal pair: one component under 26, two under 6
    p[idx(0, 6, 6)] = true;
    p[idx(1, 7, 7)] = true;
    let spacing = [2.0, 2.0, 2.5];
    let p = BinaryMask::new([8; 3], spacing, p).unwrap();
    let g = BinaryMask::new([8; 3], spacing, g).unwrap();
    let m = case_metrics("h", &p, &g, Connectivity::TwentySix).unwrap();
    assert_eq!(m.dice, Some(2.0 * 4.0 / (9.0 + 9.0)));
    assert_eq!(m.fpv_voxels, 5);
    assert!((m.fpv_ml - 5.0 * 10.0 / 1000.0).abs() < 1e-15);
    assert_eq!(m.fnv_voxels, 1);
    assert_eq!((m.n_pred_components, m.n_gt_components), (3, 2));
    let m6 = case_metrics("h", &p, &g, Connectivity::Six).unwrap();
    assert_eq!(m6.n_pred_components, 4);
    let (vol, k) = connected_components(&p, Connectivity::Six);
    assert_eq!(k, 4);
    assert_eq!(vol.get(0, 0, 0), 1.0);
}

#[test]
fn evaluate_from_files_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(23);
    let a = random_mask(&mut r, [6, 6, 6], 0.2);
    let pa = dir.path().join("a.nii.gz");
    write_volume(&a.to_volume(), &pa).unwrap();
    let m = evaluate_case("a", &pa, &pa, 1).unwrap();
    assert_eq!(m.dice, Some(1.0));
    assert_eq!((m.fpv_voxels, m.fnv_voxels), (0, 0));
    let empty = BinaryMask::empty([6, 6, 6], [1.0; 3]).unwrap();
    let e = case_metrics("e", &empty, &empty, Connectivity::TwentySix).unwrap();
    assert_eq!(e.dice, None);
    let csv = metrics_csv(&[m, e]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("e,nan,"));
    assert!(lines[3].starts_with("mean,1.000000,1,"), "{}", lines[3]);
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = BinaryMask::empty([2, 2, 2], [1.0; 3]).unwrap();
    let b = BinaryMask::empty([2, 2, 3], [1.0; 3]).unwrap();
    assert!(dice(&a, &b).is_err());
    assert!(false_positive_volume(&a, &b, Connectivity::Six).is_err());
}
