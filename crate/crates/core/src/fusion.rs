//! Grouped organ label maps with the lesion class painted on top.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nifti::{read_volume_as, NiftiError};
use crate::volume::{BinaryMask, Volume3D, VolumeError, VolumeKind};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("mask {0:?} is not a member of any organ group")]
    UnknownMaskName(String),
    #[error("group id {0} is not in the table")]
    UnknownGroupId(u32),
    #[error("shape or spacing mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid group table: {0}")]
    InvalidTable(String),
    #[error("organ manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganGroup {
    pub id: u32,
    pub name: String,
    /// Mask names folded into this group.
    pub members: Vec<String>,
}

/// Ordered group table. Ids are dense from 1 and the last group is the lesion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganGroupTable {
    groups: Vec<OrganGroup>,
    /// Silently skip masks whose name matches no group.
    #[serde(default)]
    pub ignore_unknown: bool,
}

const DEFAULT_GROUPS: [(&str, &[&str]); 13] = [
    ("brain", &["brain"]),
    ("heart", &["heart"]),
    ("aorta", &["aorta"]),
    ("liver", &["liver"]),
    ("kidneys", &["kidneys", "kidney_left", "kidney_right"]),
    ("urinary_bladder", &["urinary_bladder"]),
    ("spleen", &["spleen"]),
    (
        "digestive_system",
        &["digestive_system", "esophagus", "stomach", "duodenum", "small_bowel", "colon"],
    ),
    ("prostate", &["prostate"]),
    ("skeleton", &["skeleton", "skull", "spine", "ribs", "sternum", "pelvis", "femur_left", "femur_right"]),
    (
        "lungs",
        &[
            "lungs",
            "lung_upper_lobe_left",
            "lung_lower_lobe_left",
            "lung_upper_lobe_right",
            "lung_middle_lobe_right",
            "lung_lower_lobe_right",
        ],
    ),
    ("pancreas", &["pancreas"]),
    ("lesion", &["lesion"]),
];

impl Default for OrganGroupTable {
    fn default() -> Self {
        let groups = DEFAULT_GROUPS
            .iter()
            .enumerate()
            .map(|(i, (name, members))| OrganGroup {
                id: i as u32 + 1,
                name: name.to_string(),
                members: members.iter().map(|m| m.to_string()).collect(),
            })
            .collect();
        Self {
            groups,
            ignore_unknown: false,
        }
    }
}

impl OrganGroupTable {
    pub fn new(groups: Vec<OrganGroup>, ignore_unknown: bool) -> Result<Self, FusionError> {
        let table = Self { groups, ignore_unknown };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.groups.len() < 2 {
            return Err(FusionError::InvalidTable("need at least one organ group and the lesion".into()));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.id != i as u32 + 1 {
                return Err(FusionError::InvalidTable(format!(
                    "ids must be dense from 1; position {i} holds {}",
                    g.id
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for m in self.groups.iter().flat_map(|g| &g.members) {
            if !seen.insert(m.as_str()) {
                return Err(FusionError::InvalidTable(format!("mask {m:?} listed in two groups")));
            }
        }
        Ok(())
    }

    pub fn groups(&self) -> &[OrganGroup] {
        &self.groups
    }

    /// Highest id, reserved for the lesion.
    pub fn lesion_id(&self) -> u32 {
        self.groups.len() as u32
    }

    pub fn group_of(&self, mask_name: &str) -> Option<u32> {
        self.groups
            .iter()
            .find(|g| g.members.iter().any(|m| m == mask_name))
            .map(|g| g.id)
    }

    pub fn contains_id(&self, id: u32) -> bool {
        id == 0 || id <= self.lesion_id()
    }
}

fn check_grid(reference: &BinaryMask, other: &BinaryMask, name: &str) -> Result<(), FusionError> {
    if reference.same_grid(other) {
        Ok(())
    } else {
        Err(FusionError::ShapeMismatch(format!(
            "mask {name:?} is {:?} @ {:?} mm, lesion is {:?} @ {:?} mm",
            other.shape(),
            other.spacing(),
            reference.shape(),
            reference.spacing()
        )))
    }
}

/// Paint every organ mask with its group id, higher ids winning overlaps,
/// then paint the lesion with the table's lesion id.
pub fn merge_organ_masks(
    organs: &[(String, BinaryMask)],
    lesion: &BinaryMask,
    table: &OrganGroupTable,
) -> Result<Volume3D, FusionError> {
    table.validate()?;
    let lesion_id = table.lesion_id();
    let mut fused = vec![0u32; lesion.len()];
    for (name, mask) in organs {
        check_grid(lesion, mask, name)?;
        let id = match table.group_of(name) {
            Some(id) if id != lesion_id => id,
            Some(_) => lesion_id,
            None if table.ignore_unknown => continue,
            None => return Err(FusionError::UnknownMaskName(name.clone())),
        };
        for (f, &b) in fused.iter_mut().zip(mask.bits()) {
            if b && id > *f {
                *f = id;
            }
        }
    }
    for (f, &b) in fused.iter_mut().zip(lesion.bits()) {
        if b {
            *f = lesion_id;
        }
    }
    Ok(Volume3D::new(
        lesion.shape(),
        lesion.spacing(),
        VolumeKind::Label,
        fused.into_iter().map(f64::from).collect(),
    )?)
}

/// Voxels of `fused` equal to `id`; id 0 gives the background.
pub fn split_label_map(fused: &Volume3D, id: u32, table: &OrganGroupTable) -> Result<BinaryMask, FusionError> {
    if !table.contains_id(id) {
        return Err(FusionError::UnknownGroupId(id));
    }
    Ok(BinaryMask::from_label(fused, id))
}

/// `{case_id, lesion_path, organs: {name: path}}`; relative paths resolve
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganManifest {
    pub case_id: String,
    pub lesion_path: PathBuf,
    pub organs: BTreeMap<String, PathBuf>,
}

impl OrganManifest {
    pub fn load(path: &Path) -> Result<Self, FusionError> {
        let text = std::fs::read_to_string(path).map_err(|e| FusionError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut m: OrganManifest = serde_json::from_str(&text).map_err(|e| FusionError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.lesion_path = base.join(&m.lesion_path);
        for p in m.organs.values_mut() {
            *p = base.join(&*p);
        }
        Ok(m)
    }
}

/// Load every mask named in `manifest` and merge them.
pub fn fuse_manifest(manifest: &OrganManifest, table: &OrganGroupTable) -> Result<Volume3D, FusionError> {
    let lesion_vol = read_volume_as(&manifest.lesion_path, Some(VolumeKind::Label))?;
    let lesion = BinaryMask::from_nonzero(&lesion_vol);
    let mut organs = Vec::with_capacity(manifest.organs.len());
    for (name, path) in &manifest.organs {
        let vol = read_volume_as(path, Some(VolumeKind::Label))?;
        organs.push((name.clone(), BinaryMask::from_nonzero(&vol)));
    }
    let fused = merge_organ_masks(&organs, &lesion, table)?;
    Ok(Volume3D::with_origin(
        fused.shape(),
        fused.spacing(),
        lesion_vol.origin(),
        VolumeKind::Label,
        fused.into_data(),
    )?)
}
