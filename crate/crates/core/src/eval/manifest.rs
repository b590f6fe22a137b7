use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::labels::ClassLabelSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Base => "base",
            Split::Novel => "novel",
        })
    }
}

/// One image with its ground truth, as listed in a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image_ref: PathBuf,
    /// Canonical label text.
    pub ground_truth: String,
    pub split: Split,
    pub dataset_id: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    image: PathBuf,
    label: String,
    split: Split,
    dataset: String,
}

/// Loads a manifest whose records all use `class_set`.
pub fn load_manifest(path: impl AsRef<Path>, class_set: &ClassLabelSet) -> Result<Vec<ManifestRecord>, EvalError> {
    load_with(path.as_ref(), |_| Some(class_set))
}

/// Loads a manifest spanning several datasets, validating each record against
/// the class set registered under its `dataset` field.
pub fn load_manifest_multi(
    path: impl AsRef<Path>,
    class_sets: &BTreeMap<String, ClassLabelSet>,
) -> Result<Vec<ManifestRecord>, EvalError> {
    load_with(path.as_ref(), |ds| class_sets.get(ds))
}

fn load_with<'a>(
    path: &Path,
    lookup: impl Fn(&str) -> Option<&'a ClassLabelSet>,
) -> Result<Vec<ManifestRecord>, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    let base_dir = path.parent().unwrap_or(Path::new(""));
    let err = |line: usize, message: String| EvalError::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(raw).map_err(|e| err(line, e.to_string()))?;
        let class_set =
            lookup(&parsed.dataset).ok_or_else(|| err(line, format!("no class list for dataset {:?}", parsed.dataset)))?;
        let label = class_set
            .find(&parsed.label)
            .ok_or_else(|| err(line, format!("label {:?} is not in the class list", parsed.label)))?;
        let image_ref = if parsed.image.is_absolute() {
            parsed.image
        } else {
            base_dir.join(parsed.image)
        };
        if fs::metadata(&image_ref).is_err() {
            log::warn!("manifest line {line}: image {} is not readable", image_ref.display());
        }
        records.push(ManifestRecord {
            image_ref,
            ground_truth: label.canonical_text.clone(),
            split: parsed.split,
            dataset_id: parsed.dataset,
        });
    }
    if records.is_empty() {
        return Err(err(0, "manifest has no records".into()));
    }
    Ok(records)
}
