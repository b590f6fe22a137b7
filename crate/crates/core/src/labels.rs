//! Candidate class labels, canonicalization, and label prompt templates.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Placeholder token substituted by [`apply_template`].
pub const PLACEHOLDER: &str = "{}";

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("label is empty after canonicalization: {0:?}")]
    EmptyLabel(String),
    #[error("line {line}: label is empty after canonicalization: {raw:?}")]
    EmptyLabelAt { line: usize, raw: String },
    #[error("class list {path} not readable: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("class list {0} contains no labels")]
    EmptyFile(PathBuf),
    #[error("class set needs at least 2 labels, got {0}")]
    TooFewLabels(usize),
    #[error("duplicate label {canonical:?} on lines {first} and {second}")]
    DuplicateLabel {
        canonical: String,
        first: usize,
        second: usize,
    },
    #[error("template must contain exactly one `{{}}` placeholder, found {0}")]
    BadPlaceholderCount(usize),
    #[error("template file {0} must hold an id line and a template line")]
    BadTemplateFile(PathBuf),
}

/// Normalizes label text: underscores become spaces, whitespace runs collapse
/// to a single space, the ends are trimmed and everything is lowercased.
///
/// Punctuation is kept as-is.
pub fn canonicalize(text: &str) -> Result<String, LabelError> {
    let spaced = text.replace('_', " ");
    let collapsed = spaced.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        return Err(LabelError::EmptyLabel(text.to_string()));
    }
    Ok(collapsed.to_lowercase())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassLabel {
    pub raw_text: String,
    pub canonical_text: String,
    pub index: usize,
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text)
    }
}

/// The dataset's candidate classes, in file order.
///
/// Immutable once built; share it freely between workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLabelSet {
    dataset_id: String,
    labels: Vec<ClassLabel>,
}

impl ClassLabelSet {
    /// Builds a set from raw label strings. Line numbers in errors are 1-based
    /// positions in `raw`.
    pub fn new<I, S>(dataset_id: impl Into<String>, raw: I) -> Result<Self, LabelError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let numbered: Vec<(usize, String)> = raw
            .into_iter()
            .enumerate()
            .map(|(i, s)| (i + 1, s.as_ref().to_string()))
            .collect();
        Self::from_numbered(dataset_id.into(), numbered)
    }

    fn from_numbered(dataset_id: String, lines: Vec<(usize, String)>) -> Result<Self, LabelError> {
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut labels = Vec::with_capacity(lines.len());
        for (line, raw) in lines {
            let canonical_text = canonicalize(&raw).map_err(|_| LabelError::EmptyLabelAt {
                line,
                raw: raw.clone(),
            })?;
            if let Some(&first) = seen.get(&canonical_text) {
                return Err(LabelError::DuplicateLabel {
                    canonical: canonical_text,
                    first,
                    second: line,
                });
            }
            seen.insert(canonical_text.clone(), line);
            labels.push(ClassLabel {
                raw_text: raw,
                canonical_text,
                index: labels.len(),
            });
        }
        if labels.len() < 2 {
            return Err(LabelError::TooFewLabels(labels.len()));
        }
        Ok(Self { dataset_id, labels })
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&ClassLabel> {
        self.labels.get(index)
    }

    /// Looks a label up by its canonical form.
    pub fn find_canonical(&self, canonical: &str) -> Option<&ClassLabel> {
        self.labels.iter().find(|l| l.canonical_text == canonical)
    }

    /// Canonicalizes `text` and looks it up.
    pub fn find(&self, text: &str) -> Option<&ClassLabel> {
        canonicalize(text).ok().and_then(|c| self.find_canonical(&c))
    }

    /// Canonical labels joined with ", " in index order.
    pub fn joined_canonical(&self) -> String {
        self.labels
            .iter()
            .map(|l| l.canonical_text.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Writes the raw label text back out, one per line.
    pub fn to_class_list_string(&self) -> String {
        let mut out = String::new();
        for l in &self.labels {
            out.push_str(&l.raw_text);
            out.push('\n');
        }
        out
    }
}

/// Loads a class-list file: UTF-8, one label per line, blank lines and
/// `#`-prefixed comment lines skipped. The dataset id is the file stem.
pub fn load_class_list(path: impl AsRef<Path>) -> Result<ClassLabelSet, LabelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| LabelError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let dataset_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_class_list(dataset_id, &text).map_err(|e| match e {
        LabelError::TooFewLabels(0) => LabelError::EmptyFile(path.to_path_buf()),
        other => other,
    })
}

/// Parses class-list text. Line numbers refer to the physical lines of `text`.
pub fn parse_class_list(dataset_id: impl Into<String>, text: &str) -> Result<ClassLabelSet, LabelError> {
    let lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, l)| (n, l.to_string()))
        .collect();
    ClassLabelSet::from_numbered(dataset_id.into(), lines)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    template_id: String,
    template_text: String,
}

impl PromptTemplate {
    pub fn new(template_id: impl Into<String>, template_text: impl Into<String>) -> Result<Self, LabelError> {
        let template_text = template_text.into();
        let n = template_text.matches(PLACEHOLDER).count();
        if n != 1 {
            return Err(LabelError::BadPlaceholderCount(n));
        }
        Ok(Self {
            template_id: template_id.into(),
            template_text,
        })
    }

    /// The `{}` template: labels are embedded as-is.
    pub fn identity() -> Self {
        Self {
            template_id: "identity".into(),
            template_text: PLACEHOLDER.into(),
        }
    }

    /// Template file: first line is the id, second line the template text.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LabelError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| LabelError::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = text.lines();
        match (lines.next(), lines.next()) {
            (Some(id), Some(body)) if !id.trim().is_empty() => Self::new(id.trim(), body),
            _ => Err(LabelError::BadTemplateFile(path.to_path_buf())),
        }
    }

    pub fn template_id(&self) -> &str {
        &self.template_id
    }

    pub fn template_text(&self) -> &str {
        &self.template_text
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::identity()
    }
}

pub fn apply_template(template: &PromptTemplate, label: &ClassLabel) -> String {
    template
        .template_text
        .replacen(PLACEHOLDER, &label.canonical_text, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".txt").tempfile().unwrap();
        std::io::Write::write_all(&mut f, contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn canonicalize_rules() {
        assert_eq!(canonicalize("Blanket_Flower").unwrap(), "blanket flower");
        assert_eq!(canonicalize("  Infant   Bed ").unwrap(), "infant bed");
        assert!(matches!(canonicalize("___"), Err(LabelError::EmptyLabel(_))));
        assert_eq!(canonicalize("infant bed.").unwrap(), "infant bed.");
    }

    #[test]
    fn load_vehicle_labels() {
        let f = write_tmp("Red Car\nOld Car\nRed Apple\n");
        let set = load_class_list(f.path()).unwrap();
        let idx: Vec<_> = set.labels().iter().map(|l| l.index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        assert_eq!(set.labels()[0].canonical_text, "red car");
        assert_eq!(set.labels()[2].raw_text, "Red Apple");
    }

    #[test]
    fn duplicate_names_both_lines() {
        let f = write_tmp("cat\n\n# comment\nCat\n");
        match load_class_list(f.path()) {
            Err(LabelError::DuplicateLabel { first, second, .. }) => {
                assert_eq!((first, second), (1, 4));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn padded_underscore_label() {
        let set = parse_class_list("d", "  blanket_flower  \nsofa\n").unwrap();
        assert_eq!(set.labels()[0].canonical_text, "blanket flower");
        assert_eq!(set.labels()[0].raw_text, "  blanket_flower  ");
    }

    #[test]
    fn empty_and_missing_files() {
        let f = write_tmp("\n  \n# only comments\n");
        assert!(matches!(load_class_list(f.path()), Err(LabelError::EmptyFile(_))));
        assert!(matches!(
            load_class_list("/definitely/not/here.txt"),
            Err(LabelError::Unreadable { .. })
        ));
        assert!(matches!(parse_class_list("d", "one\n"), Err(LabelError::TooFewLabels(1))));
        assert!(matches!(
            parse_class_list("d", "ok\n___\n"),
            Err(LabelError::EmptyLabelAt { line: 2, .. })
        ));
    }

    #[test]
    fn templates() {
        let set = ClassLabelSet::new("d", ["Red Car", "gaillardia", "Blanket_Flower"]).unwrap();
        let photo = PromptTemplate::new("photo", "a photo of a {}").unwrap();
        assert_eq!(apply_template(&photo, &set.labels()[0]), "a photo of a red car");
        assert_eq!(apply_template(&PromptTemplate::identity(), &set.labels()[1]), "gaillardia");
        assert_eq!(apply_template(&photo, &set.labels()[2]), "a photo of a blanket flower");
        assert!(matches!(PromptTemplate::new("x", "no slot"), Err(LabelError::BadPlaceholderCount(0))));
        assert!(matches!(PromptTemplate::new("x", "{} and {}"), Err(LabelError::BadPlaceholderCount(2))));
    }

    #[test]
    fn template_file() {
        let f = write_tmp("photo\na photo of a {}\n");
        let t = PromptTemplate::load(f.path()).unwrap();
        assert_eq!(t.template_id(), "photo");
        assert_eq!(t.template_text(), "a photo of a {}");
        let bad = write_tmp("only-id\n");
        assert!(PromptTemplate::load(bad.path()).is_err());
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(s in "\\PC{0,24}") {
            if let Ok(once) = canonicalize(&s) {
                prop_assert_eq!(canonicalize(&once).unwrap(), once);
            }
        }

        #[test]
        fn identity_template_returns_canonical(s in "[A-Za-z_ ]{0,12}[A-Za-z][A-Za-z_ ]{0,12}") {
            let set = ClassLabelSet::new("d", [s.as_str(), "__other label__"]);
            if let Ok(set) = set {
                let l = &set.labels()[0];
                prop_assert_eq!(apply_template(&PromptTemplate::identity(), l), l.canonical_text.clone());
            }
        }

        #[test]
        fn class_list_reserializes(words in proptest::collection::hash_set("[a-z]{1,8}", 2..8)) {
            let mut body = String::from("\n");
            for w in &words {
                body.push_str(w);
                body.push_str("\n\n");
            }
            let set = parse_class_list("d", &body).unwrap();
            let expect: String = body.lines().filter(|l| !l.is_empty()).map(|l| format!("{l}\n")).collect();
            prop_assert_eq!(set.to_class_list_string(), expect);
        }
    }
}
