//! A cohort of longitudinal samples with its train/validation/test split,
//! and its on-disk layout:
//!
//! ```text
//! <root>/dataset.json
//! <root>/data/<subject>/t0/{t1,flair,mask}.nii.gz   (reference time point t_i)
//! <root>/data/<subject>/t1/{t1,flair,mask}.nii.gz   (other time point t_j)
//! <root>/data/<subject>/gt_field.raw (+ .json)      (t_j -> t_i displacement, optional)
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Ix4;
use serde::{Deserialize, Serialize};

use super::io::{format_err, io_err};
use super::{
    read_nifti, read_raw, write_nifti, write_raw, DisplacementField3D, LongitudinalSample, Result,
    ScanPair, TimePoint, VolumeError,
};

pub const DATASET_FILE: &str = "dataset.json";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(SplitName::Train),
            "val" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(format!(
                "unknown split {other:?} (expected train, val or test)"
            )),
        }
    }
}

impl Split {
    pub fn ids(&self, name: SplitName) -> &[String] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<LongitudinalSample>,
    pub split: Split,
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub shape: [usize; 3],
    pub subjects: Vec<String>,
    pub split: Split,
    /// Generator settings, echoed for provenance.
    #[serde(default)]
    pub generator: serde_json::Value,
}

fn subject_dir(root: &Path, id: &str) -> PathBuf {
    root.join("data").join(id)
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&LongitudinalSample> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    /// Samples of one split, in split order. Unknown ids are an error.
    pub fn split_samples(&self, name: SplitName) -> Result<Vec<&LongitudinalSample>> {
        self.split
            .ids(name)
            .iter()
            .map(|id| {
                self.get(id).ok_or_else(|| {
                    VolumeError::Invalid(format!("{name} split names unknown subject {id}"))
                })
            })
            .collect()
    }

    pub fn save(&self, root: &Path, generator: serde_json::Value) -> Result<()> {
        let shape = self
            .subjects
            .first()
            .map(|s| s.shape())
            .ok_or_else(|| VolumeError::Invalid("cannot save an empty dataset".into()))?;
        for s in &self.subjects {
            let dir = subject_dir(root, &s.subject_id);
            for (time, scans, mask) in [
                (TimePoint::Reference, &s.ti, Some(&s.gt_mask_ti)),
                (TimePoint::Other, &s.tj, s.gt_mask_tj.as_ref()),
            ] {
                let tdir = dir.join(time.dir_name());
                std::fs::create_dir_all(&tdir).map_err(io_err(&tdir))?;
                write_nifti(&tdir.join("t1.nii.gz"), &scans.t1)?;
                write_nifti(&tdir.join("flair.nii.gz"), &scans.flair)?;
                if let Some(m) = mask {
                    write_nifti(&tdir.join("mask.nii.gz"), m)?;
                }
            }
            if let Some(f) = &s.gt_field {
                write_raw(
                    &dir.join("gt_field.raw"),
                    &f.data.clone().into_dyn(),
                    None,
                    false,
                )?;
            }
        }
        let manifest = DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            shape,
            subjects: self.subjects.iter().map(|s| s.subject_id.clone()).collect(),
            split: self.split.clone(),
            generator,
        };
        let path = root.join(DATASET_FILE);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, json).map_err(io_err(&path))
    }

    pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
        let path = root.join(DATASET_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(format_err(
                &path,
                format!(
                    "unsupported dataset format version {}",
                    manifest.format_version
                ),
            ));
        }
        Ok(manifest)
    }

    /// Loads every subject listed in `dataset.json`.
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = Self::load_manifest(root)?;
        let subjects = manifest
            .subjects
            .iter()
            .map(|id| load_subject(root, id))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            subjects,
            split: manifest.split,
        })
    }
}

pub fn load_subject(root: &Path, id: &str) -> Result<LongitudinalSample> {
    let dir = subject_dir(root, id);
    let scans = |time: TimePoint| -> Result<ScanPair> {
        let tdir = dir.join(time.dir_name());
        Ok(ScanPair {
            t1: read_nifti(&tdir.join("t1.nii.gz"))?,
            flair: read_nifti(&tdir.join("flair.nii.gz"))?,
        })
    };
    let mask = |time: TimePoint| -> Result<Option<super::Volume3D>> {
        let path = dir.join(time.dir_name()).join("mask.nii.gz");
        if !path.exists() {
            return Ok(None);
        }
        let v = read_nifti(&path)?;
        if !v.is_mask() {
            return Err(format_err(&path, "mask is not stored as a binary mask"));
        }
        Ok(Some(v))
    };
    let field_path = dir.join("gt_field.raw");
    let gt_field = if field_path.exists() {
        let (array, _) = read_raw(&field_path)?;
        let data = array
            .into_dimensionality::<Ix4>()
            .map_err(|_| format_err(&field_path, "displacement field is not 4D"))?;
        Some(DisplacementField3D { data })
    } else {
        None
    };
    let gt_mask_ti = mask(TimePoint::Reference)?.ok_or_else(|| VolumeError::Io {
        path: dir.join("t0/mask.nii.gz").display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "reference mask missing"),
    })?;
    LongitudinalSample::new(
        id,
        scans(TimePoint::Reference)?,
        scans(TimePoint::Other)?,
        gt_mask_ti,
        mask(TimePoint::Other)?,
        gt_field,
    )
}
