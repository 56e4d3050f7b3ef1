//! Labeled subjects and the on-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/atlas.nii.gz
//! <root>/masks_gm.nii.gz, masks_wm.nii.gz
//! <root>/<subject_id>/mri.nii.gz
//! <root>/<subject_id>/pet.nii.gz   (absent for MRI-only subjects)
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atlas::{AtlasLabelMap, TissueMasks};
use crate::error::{Error, Result};
use crate::nifti_io::{load_labels, load_volume, save_labels, save_volume};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "AD")]
    Ad,
}

impl Label {
    /// AD is the positive class.
    pub fn is_positive(self) -> bool {
        self == Label::Ad
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Cn => "CN",
            Label::Ad => "AD",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub subject_id: String,
    pub label: Label,
    pub mri: Volume,
    pub pet: Option<Volume>,
}

impl PairedSample {
    pub fn new(subject_id: impl Into<String>, label: Label, mri: Volume, pet: Option<Volume>) -> Result<Self> {
        if let Some(p) = &pet {
            if p.shape() != mri.shape() {
                return Err(Error::ShapeMismatch { expected: mri.shape(), found: p.shape() });
            }
        }
        Ok(Self { subject_id: subject_id.into(), label, mri, pet })
    }

    pub fn is_paired(&self) -> bool {
        self.pet.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub has_pet: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<SubjectEntry>,
    /// Free-form provenance of the data (for phantoms: the generating spec).
    #[serde(default)]
    pub source: serde_json::Value,
}

/// Subjects together with the shared atlas space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
    pub atlas: AtlasLabelMap,
    pub masks: TissueMasks,
}

fn mask_to_labels(mask: &[bool]) -> Vec<u16> {
    mask.iter().map(|&m| m as u16).collect()
}

impl Dataset {
    pub fn write(&self, root: impl AsRef<Path>, seeds: Option<&[u64]>, source: serde_json::Value) -> Result<()> {
        let root = root.as_ref();
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let shape = self.atlas.shape();
        save_labels(self.atlas.labels(), shape, root.join("atlas.nii.gz"))?;
        save_labels(&mask_to_labels(self.masks.gm()), shape, root.join("masks_gm.nii.gz"))?;
        save_labels(&mask_to_labels(self.masks.wm()), shape, root.join("masks_wm.nii.gz"))?;
        let mut subjects = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let dir = root.join(&s.subject_id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            save_volume(&s.mri, dir.join("mri.nii.gz"))?;
            if let Some(pet) = &s.pet {
                save_volume(pet, dir.join("pet.nii.gz"))?;
            }
            subjects.push(SubjectEntry {
                id: s.subject_id.clone(),
                label: s.label,
                seed: seeds.map(|v| v[i]),
                has_pet: s.pet.is_some(),
            });
        }
        let manifest = Manifest { subjects, source };
        let path = root.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join("manifest.json");
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let (labels, shape) = load_labels(root.join("atlas.nii.gz"))?;
        let atlas = AtlasLabelMap::from_labels(labels, shape)?;
        let (gm, gs) = load_labels(root.join("masks_gm.nii.gz"))?;
        let (wm, ws) = load_labels(root.join("masks_wm.nii.gz"))?;
        if gs != shape || ws != shape {
            return Err(Error::Dataset("tissue masks do not match the atlas shape".into()));
        }
        let masks = TissueMasks::new(gm.iter().map(|&v| v > 0).collect(), wm.iter().map(|&v| v > 0).collect(), shape)?;
        let mut samples = Vec::with_capacity(manifest.subjects.len());
        for entry in &manifest.subjects {
            let dir = root.join(&entry.id);
            let mri = load_volume(dir.join("mri.nii.gz"))?;
            let pet = if entry.has_pet { Some(load_volume(dir.join("pet.nii.gz"))?) } else { None };
            if mri.shape() != shape {
                return Err(Error::ShapeMismatch { expected: shape, found: mri.shape() });
            }
            samples.push(PairedSample::new(entry.id.clone(), entry.label, mri, pet)?);
        }
        Ok(Self { samples, atlas, masks })
    }

    pub fn paired(&self) -> impl Iterator<Item = &PairedSample> {
        self.samples.iter().filter(|s| s.is_paired())
    }
}
