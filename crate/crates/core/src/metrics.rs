//! Segmentation scores: Dice, false-positive volume and false-negative
//! volume over 3D connected components.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nifti::{read_volume_as, NiftiError};
use crate::volume::{BinaryMask, Volume3D, VolumeKind};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape or spacing mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
}

/// Voxel neighbourhood used for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn neighbours(self) -> u8 {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }

    fn admits(self, d: [i64; 3]) -> bool {
        let l1 = d[0].abs() + d[1].abs() + d[2].abs();
        match self {
            Connectivity::Six => l1 == 1,
            Connectivity::Eighteen => (1..=2).contains(&l1),
            Connectivity::TwentySix => l1 >= 1,
        }
    }

    /// Neighbour offsets that precede a voxel in x-fastest scan order.
    fn backward_offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1..=0 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let before = dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0)));
                    if before && self.admits([dx, dy, dz]) {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(n: u8) -> Result<Self, String> {
        match n {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        c.neighbours()
    }
}

impl FromStr for Connectivity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let n: u8 = s.trim().parse().map_err(|_| format!("connectivity must be 6, 18 or 26, got {s:?}"))?;
        Connectivity::try_from(n)
    }
}

impl std::fmt::Display for Connectivity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.neighbours())
    }
}

/// Component id per voxel (0 = background) and the component count.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentLabels {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub labels: Vec<u32>,
    pub count: usize,
}

impl ComponentLabels {
    /// Voxel count of every component, indexed by `id - 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D::new(
            self.shape,
            self.spacing,
            VolumeKind::Label,
            self.labels.iter().map(|&l| l as f64).collect(),
        )
        .expect("component labels are a valid label volume")
    }
}

fn find(parent: &mut [u32], mut a: u32) -> u32 {
    while parent[a as usize] != a {
        let next = parent[a as usize];
        parent[a as usize] = parent[next as usize];
        a = next;
    }
    a
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labeling. Components are numbered 1..K in the order
/// their first voxel appears in x-fastest scan order.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentLabels {
    let [nx, ny, nz] = mask.shape();
    let bits = mask.bits();
    let offsets: Vec<([i64; 3], isize)> = connectivity
        .backward_offsets()
        .into_iter()
        .map(|d| (d, d[0] as isize + nx as isize * (d[1] as isize + ny as isize * d[2] as isize)))
        .collect();
    let mut provisional = vec![0u32; bits.len()];
    // parent[0] is unused so provisional ids start at 1
    let mut parent: Vec<u32> = vec![0];
    let mut i = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if bits[i] {
                    let mut current = 0u32;
                    for &(d, off) in &offsets {
                        let (xx, yy, zz) = (x as i64 + d[0], y as i64 + d[1], z as i64 + d[2]);
                        if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 {
                            continue;
                        }
                        let n = provisional[(i as isize + off) as usize];
                        if n == 0 {
                            continue;
                        }
                        if current == 0 {
                            current = n;
                        } else if n != current {
                            union(&mut parent, current, n);
                        }
                    }
                    if current == 0 {
                        current = parent.len() as u32;
                        parent.push(current);
                    }
                    provisional[i] = current;
                }
                i += 1;
            }
        }
    }
    let mut final_id = vec![0u32; parent.len()];
    let mut count = 0u32;
    for p in provisional.iter_mut() {
        if *p != 0 {
            let root = find(&mut parent, *p) as usize;
            if final_id[root] == 0 {
                count += 1;
                final_id[root] = count;
            }
            *p = final_id[root];
        }
    }
    ComponentLabels {
        shape: mask.shape(),
        spacing: mask.spacing(),
        labels: provisional,
        count: count as usize,
    }
}

/// Labeled volume plus component count.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> (Volume3D, usize) {
    let cc = label_components(mask, connectivity);
    (cc.to_volume(), cc.count)
}

fn check_grid(a: &BinaryMask, b: &BinaryMask) -> Result<(), MetricsError> {
    if a.same_grid(b) {
        Ok(())
    } else {
        Err(MetricsError::ShapeMismatch(format!(
            "{:?} @ {:?} mm vs {:?} @ {:?} mm",
            a.shape(),
            a.spacing(),
            b.shape(),
            b.spacing()
        )))
    }
}

/// `2|P∩G| / (|P|+|G|)`; `None` when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>, MetricsError> {
    check_grid(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.bits().iter().zip(gt.bits()) {
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (p + g) as f64))
}

/// Voxel count and millilitres of a volume in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentVolume {
    pub voxels: usize,
    pub ml: f64,
}

fn unmatched_volume(
    source: &BinaryMask,
    other: &BinaryMask,
    connectivity: Connectivity,
) -> (ComponentVolume, usize) {
    let cc = label_components(source, connectivity);
    let mut hit = vec![false; cc.count];
    for (&l, &o) in cc.labels.iter().zip(other.bits()) {
        if l > 0 && o {
            hit[l as usize - 1] = true;
        }
    }
    let voxels = cc
        .sizes()
        .iter()
        .zip(&hit)
        .filter(|(_, &h)| !h)
        .map(|(s, _)| s)
        .sum::<usize>();
    let ml = voxels as f64 * source.voxel_volume_mm3() / 1000.0;
    (ComponentVolume { voxels, ml }, cc.count)
}

/// Total size of predicted components that touch no ground-truth voxel.
pub fn false_positive_volume(
    pred: &BinaryMask,
    gt: &BinaryMask,
    connectivity: Connectivity,
) -> Result<ComponentVolume, MetricsError> {
    check_grid(pred, gt)?;
    Ok(unmatched_volume(pred, gt, connectivity).0)
}

/// Total size of ground-truth components that no predicted voxel touches.
pub fn false_negative_volume(
    pred: &BinaryMask,
    gt: &BinaryMask,
    connectivity: Connectivity,
) -> Result<ComponentVolume, MetricsError> {
    check_grid(pred, gt)?;
    Ok(unmatched_volume(gt, pred, connectivity).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    /// `None` when both masks are empty.
    pub dice: Option<f64>,
    pub fpv_voxels: usize,
    pub fpv_ml: f64,
    pub fnv_voxels: usize,
    pub fnv_ml: f64,
    pub n_pred_components: usize,
    pub n_gt_components: usize,
}

pub fn case_metrics(
    case_id: &str,
    pred: &BinaryMask,
    gt: &BinaryMask,
    connectivity: Connectivity,
) -> Result<CaseMetrics, MetricsError> {
    let d = dice(pred, gt)?;
    let (fp, n_pred) = unmatched_volume(pred, gt, connectivity);
    let (fn_, n_gt) = unmatched_volume(gt, pred, connectivity);
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        dice: d,
        fpv_voxels: fp.voxels,
        fpv_ml: fp.ml,
        fnv_voxels: fn_.voxels,
        fnv_ml: fn_.ml,
        n_pred_components: n_pred,
        n_gt_components: n_gt,
    })
}

/// Load two label files and score voxels equal to `label` with 26-connectivity.
pub fn evaluate_case(
    case_id: &str,
    pred_path: &Path,
    gt_path: &Path,
    label: u32,
) -> Result<CaseMetrics, MetricsError> {
    let pred = read_volume_as(pred_path, Some(VolumeKind::Label))?;
    let gt = read_volume_as(gt_path, Some(VolumeKind::Label))?;
    if !pred.same_grid(&gt) {
        return Err(MetricsError::ShapeMismatch(format!(
            "{}: {:?} @ {:?} mm vs {}: {:?} @ {:?} mm",
            pred_path.display(),
            pred.shape(),
            pred.spacing(),
            gt_path.display(),
            gt.shape(),
            gt.spacing()
        )));
    }
    case_metrics(
        case_id,
        &BinaryMask::from_label(&pred, label),
        &BinaryMask::from_label(&gt, label),
        Connectivity::TwentySix,
    )
}

pub const CSV_HEADER: &str = "case_id,dice,dice_defined,fpv_voxels,fpv_ml,fnv_voxels,fnv_ml,n_pred_cc,n_gt_cc";

fn fmt_dice(d: Option<f64>) -> String {
    d.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

/// Per-case rows followed by a `mean` row. Dice is averaged over defined
/// cases only; the mean row's `dice_defined` column holds their count.
pub fn metrics_csv(cases: &[CaseMetrics]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for c in cases {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{},{:.6},{},{}",
            c.case_id,
            fmt_dice(c.dice),
            c.dice.is_some() as u8,
            c.fpv_voxels,
            c.fpv_ml,
            c.fnv_voxels,
            c.fnv_ml,
            c.n_pred_components,
            c.n_gt_components
        );
    }
    if !cases.is_empty() {
        let m = MeanMetrics::of(cases);
        let _ = writeln!(
            out,
            "mean,{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            fmt_dice(m.dice),
            m.dice_defined,
            m.fpv_voxels,
            m.fpv_ml,
            m.fnv_voxels,
            m.fnv_ml,
            m.n_pred_components,
            m.n_gt_components
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub dice: Option<f64>,
    pub dice_defined: usize,
    pub fpv_voxels: f64,
    pub fpv_ml: f64,
    pub fnv_voxels: f64,
    pub fnv_ml: f64,
    pub n_pred_components: f64,
    pub n_gt_components: f64,
}

impl MeanMetrics {
    pub fn of(cases: &[CaseMetrics]) -> Self {
        let n = cases.len().max(1) as f64;
        let defined: Vec<f64> = cases.iter().filter_map(|c| c.dice).collect();
        let mean = |f: &dyn Fn(&CaseMetrics) -> f64| cases.iter().map(f).sum::<f64>() / n;
        Self {
            dice: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
            dice_defined: defined.len(),
            fpv_voxels: mean(&|c| c.fpv_voxels as f64),
            fpv_ml: mean(&|c| c.fpv_ml),
            fnv_voxels: mean(&|c| c.fnv_voxels as f64),
            fnv_ml: mean(&|c| c.fnv_ml),
            n_pred_components: mean(&|c| c.n_pred_components as f64),
            n_gt_components: mean(&|c| c.n_gt_components as f64),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(shape: [usize; 3], on: &[[usize; 3]]) -> BinaryMask {
        let mut bits = vec![false; shape.iter().product()];
        for p in on {
            bits[p[0] + shape[0] * (p[1] + shape[1] * p[2])] = true;
        }
        BinaryMask::new(shape, [1.0; 3], bits).unwrap()
    }

    #[test]
    fn corner_contact() {
        let m = mask([3, 3, 3], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(label_components(&m, Connectivity::TwentySix).count, 1);
        assert_eq!(label_components(&m, Connectivity::Eighteen).count, 2);
        assert_eq!(label_components(&m, Connectivity::Six).count, 2);
        let edge = mask([3, 3, 3], &[[0, 0, 0], [1, 1, 0]]);
        assert_eq!(label_components(&edge, Connectivity::Eighteen).count, 1);
        assert_eq!(label_components(&edge, Connectivity::Six).count, 2);
    }

    #[test]
    fn offsets_are_half_neighbourhoods() {
        assert_eq!(Connectivity::Six.backward_offsets().len(), 3);
        assert_eq!(Connectivity::Eighteen.backward_offsets().len(), 9);
        assert_eq!(Connectivity::TwentySix.backward_offsets().len(), 13);
    }

    #[test]
    fn u_shape_merges_and_numbering_follows_scan() {
        // two arms joined at the far end, then a separate blob scanned later
        let m = mask(
            [5, 3, 1],
            &[[0, 0, 0], [2, 0, 0], [0, 1, 0], [2, 1, 0], [0, 2, 0], [1, 2, 0], [2, 2, 0], [4, 0, 0]],
        );
        let cc = label_components(&m, Connectivity::Six);
        assert_eq!(cc.count, 2);
        assert_eq!(cc.labels[0], 1);
        assert_eq!(cc.labels[2], 1);
        assert_eq!(cc.labels[4], 2);
    }

    #[test]
    fn empty_and_dice_cases() {
        let e = mask([4, 4, 4], &[]);
        assert_eq!(label_components(&e, Connectivity::TwentySix).count, 0);
        assert_eq!(dice(&e, &e).unwrap(), None);
        let a = mask([4, 4, 4], &[[0, 0, 0], [3, 3, 3]]);
        let b = mask([4, 4, 4], &[[0, 0, 0]]);
        assert!((dice(&a, &b).unwrap().unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&a, &e).unwrap(), Some(0.0));
        assert_eq!(dice(&a, &a).unwrap(), Some(1.0));
    }

    #[test]
    fn fpv_in_millilitres() {
        let spacing = [3.3; 3];
        let mut bits = vec![false; 8 * 8 * 8];
        for b in bits.iter_mut().take(10) {
            *b = true;
        }
        let pred = BinaryMask::new([8, 8, 8], spacing, bits).unwrap();
        let gt = BinaryMask::empty([8, 8, 8], spacing).unwrap();
        let fp = false_positive_volume(&pred, &gt, Connectivity::TwentySix).unwrap();
        assert_eq!(fp.voxels, 10);
        assert!((fp.ml - 0.35937).abs() < 1e-12);
        assert_eq!(false_negative_volume(&pred, &gt, Connectivity::TwentySix).unwrap().voxels, 0);
    }

    #[test]
    fn shape_mismatch() {
        let a = mask([4, 4, 4], &[]);
        let b = mask([4, 4, 5], &[]);
        assert!(matches!(dice(&a, &b), Err(MetricsError::ShapeMismatch(_))));
    }

    #[test]
    fn csv_layout() {
        let cases = vec![
            CaseMetrics {
                case_id: "a".into(),
                dice: Some(0.5),
                fpv_voxels: 2,
                fpv_ml: 0.002,
                fnv_voxels: 0,
                fnv_ml: 0.0,
                n_pred_components: 2,
                n_gt_components: 1,
            },
            CaseMetrics {
                case_id: "b".into(),
                dice: None,
                fpv_voxels: 0,
                fpv_ml: 0.0,
                fnv_voxels: 0,
                fnv_ml: 0.0,
                n_pred_components: 0,
                n_gt_components: 0,
            },
        ];
        let csv = metrics_csv(&cases);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "a,0.500000,1,2,0.002000,0,0.000000,2,1");
        assert_eq!(lines[2], "b,nan,0,0,0.000000,0,0.000000,0,0");
        assert_eq!(lines[3], "mean,0.500000,1,1.000000,0.001000,0.000000,0.000000,1.000000,0.500000");
    }

    #[test]
    fn connectivity_parsing() {
        assert_eq!("18".parse::<Connectivity>().unwrap(), Connectivity::Eighteen);
        assert!("7".parse::<Connectivity>().is_err());
        assert_eq!(serde_json::to_string(&Connectivity::Six).unwrap(), "6");
    }
}
