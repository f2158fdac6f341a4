//! Dataset descriptor (`dataset.json`) parsing and layout conventions.
//!
//! A dataset directory holds `dataset.json` plus paired image/label `.mvox`
//! files. The descriptor lists modality names per channel, the label
//! vocabulary, and the training pairs; unknown JSON keys are ignored so
//! descriptors can carry extra metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
pub struct CasePaths {
    pub image: String,
    pub label: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    /// Channel index (as decimal string key) to modality name.
    pub modality: BTreeMap<String, String>,
    /// Class id (as decimal string key) to class name. Class 0 is background.
    pub labels: BTreeMap<String, String>,
    #[serde(rename = "numTraining")]
    pub num_training: usize,
    pub training: Vec<CasePaths>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetDescriptor {
    pub fn read(dataset_dir: &Path) -> Result<Self> {
        let path = dataset_dir.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?;
        let mut desc: DatasetDescriptor = serde_json::from_str(&text).map_err(|e| {
            Error::validation(format!("{}: {e}", path.display()))
        })?;
        desc.root = dataset_dir.to_path_buf();
        desc.validate()?;
        Ok(desc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.training.is_empty() {
            return Err(Error::validation("descriptor lists no training cases"));
        }
        if self.num_training != self.training.len() {
            return Err(Error::validation(format!(
                "numTraining is {} but {} training pairs are listed",
                self.num_training,
                self.training.len()
            )));
        }
        if self.modality.is_empty() {
            return Err(Error::validation("descriptor lists no modalities"));
        }
        for key in self.labels.keys() {
            key.parse::<u8>().map_err(|_| {
                Error::validation(format!("label key {key:?} is not an integer class id"))
            })?;
        }
        if !self.labels.contains_key("0") {
            return Err(Error::validation("label 0 (background) missing from descriptor"));
        }
        for key in self.modality.keys() {
            key.parse::<usize>().map_err(|_| {
                Error::validation(format!("modality key {key:?} is not a channel index"))
            })?;
        }
        Ok(())
    }

    /// Number of classes including background.
    pub fn num_classes(&self) -> usize {
        self.labels
            .keys()
            .map(|k| k.parse::<usize>().unwrap_or(0) + 1)
            .max()
            .unwrap_or(1)
    }

    /// Foreground class ids, ascending.
    pub fn foreground_classes(&self) -> Vec<u8> {
        let mut ids: Vec<u8> = self
            .labels
            .keys()
            .filter_map(|k| k.parse::<u8>().ok())
            .filter(|&c| c != 0)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// True when any channel's modality string contains "ct"
    /// (case-insensitive).
    pub fn is_ct(&self) -> bool {
        self.modality.values().any(|m| m.to_lowercase().contains("ct"))
    }

    /// Case identifier derived from the image file stem.
    pub fn case_id(paths: &CasePaths) -> String {
        Path::new(&paths.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| paths.image.clone())
    }

    pub fn image_path(&self, paths: &CasePaths) -> PathBuf {
        self.root.join(&paths.image)
    }

    pub fn label_path(&self, paths: &CasePaths) -> PathBuf {
        self.root.join(&paths.label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_desc(dir: &Path, body: &str) {
        fs::write(dir.join("dataset.json"), body).unwrap();
    }

    #[test]
    fn parses_and_ignores_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        write_desc(
            dir.path(),
            r#"{
              "name": "toy",
              "release": "1.0",
              "modality": {"0": "CT"},
              "labels": {"0": "background", "1": "organ", "2": "lesion"},
              "numTraining": 2,
              "training": [
                {"image": "imagesTr/a.mvox", "label": "labelsTr/a.mvox"},
                {"image": "imagesTr/b.mvox", "label": "labelsTr/b.mvox"}
              ],
              "extra": {"nested": true}
            }"#,
        );
        let desc = DatasetDescriptor::read(dir.path()).unwrap();
        assert_eq!(desc.name, "toy");
        assert!(desc.is_ct());
        assert_eq!(desc.num_classes(), 3);
        assert_eq!(desc.foreground_classes(), vec![1, 2]);
        assert_eq!(DatasetDescriptor::case_id(&desc.training[0]), "a");
        assert_eq!(
            desc.image_path(&desc.training[1]),
            dir.path().join("imagesTr/b.mvox")
        );
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_desc(
            dir.path(),
            r#"{"name":"t","modality":{"0":"MRI"},"labels":{"0":"bg"},
                "numTraining": 3,
                "training": [{"image":"i.mvox","label":"l.mvox"}]}"#,
        );
        let err = DatasetDescriptor::read(dir.path()).unwrap_err();
        assert!(err.to_string().contains("numTraining is 3"), "{err}");
    }

    #[test]
    fn missing_key_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        write_desc(dir.path(), r#"{"name":"t","labels":{"0":"bg"}}"#);
        let err = DatasetDescriptor::read(dir.path()).unwrap_err();
        assert!(err.to_string().contains("modality"), "{err}");
    }

    #[test]
    fn non_ct_modalities() {
        let dir = tempfile::tempdir().unwrap();
        write_desc(
            dir.path(),
            r#"{"name":"t","modality":{"0":"T1w","1":"T2w"},
                "labels":{"0":"bg","1":"fg"},
                "numTraining": 1,
                "training":[{"image":"i.mvox","label":"l.mvox"}]}"#,
        );
        assert!(!DatasetDescriptor::read(dir.path()).unwrap().is_ct());
    }
}
