//! Evaluation over labelled manifests: per-split accuracy, cross-dataset
//! averages and report files.
//!
//! Accuracy is `100 * correct / total` per split, carried at full precision
//! and rounded to two decimals only when rendered. A split with no records
//! has no accuracy (`None`), not zero.

mod manifest;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingBackend;
use crate::gateway::Gateway;
use crate::labels::ClassLabelSet;
use crate::pipeline::{Classification, Classifier, MatchedBy, PipelineConfig, PipelineError};

pub use manifest::{load_manifest, load_manifest_multi, ManifestRecord, Split};
pub use report::{
    read_aggregate, read_report, render_table, write_aggregate, write_report, AGGREGATE_JSON, REPORT_JSON, SUMMARY_CSV,
    TABLE_TXT,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("manifest {path} line {line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error("{0}")]
    Io(String),
    #[error("evaluation aborted: {0}")]
    Config(#[source] PipelineError),
    #[error("{0}")]
    Invalid(String),
    #[error("duplicate dataset {0} in aggregate")]
    DuplicateDataset(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub total: usize,
    pub correct: usize,
    /// Refused records; always a subset of the incorrect ones.
    pub refusals: usize,
}

impl SplitCounts {
    pub fn incorrect(&self) -> usize {
        self.total - self.correct
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }

    fn add(&mut self, r: &RecordResult) {
        self.total += 1;
        self.correct += usize::from(r.correct);
        self.refusals += usize::from(r.matched_by == Some(MatchedBy::RefusalFallback));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordResult {
    pub image_ref: String,
    pub ground_truth: String,
    pub split: Split,
    /// Canonical predicted label; `None` for the non-label outcome or errors.
    pub predicted: Option<String>,
    pub correct: bool,
    pub matched_by: Option<MatchedBy>,
    /// Per-record pipeline error, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub base: SplitCounts,
    pub novel: SplitCounts,
    pub overall: SplitCounts,
    pub accuracy_base: Option<f64>,
    pub accuracy_novel: Option<f64>,
    pub accuracy_overall: Option<f64>,
    pub per_record: Vec<RecordResult>,
}

impl EvalReport {
    /// Tallies results, keeping them in the given order.
    pub fn from_results(dataset_id: impl Into<String>, per_record: Vec<RecordResult>) -> Self {
        let mut base = SplitCounts::default();
        let mut novel = SplitCounts::default();
        let mut overall = SplitCounts::default();
        for r in &per_record {
            match r.split {
                Split::Base => base.add(r),
                Split::Novel => novel.add(r),
            }
            overall.add(r);
        }
        Self {
            dataset_id: dataset_id.into(),
            accuracy_base: base.accuracy(),
            accuracy_novel: novel.accuracy(),
            accuracy_overall: overall.accuracy(),
            base,
            novel,
            overall,
            per_record,
        }
    }

    pub fn counts(&self, split: Option<Split>) -> &SplitCounts {
        match split {
            Some(Split::Base) => &self.base,
            Some(Split::Novel) => &self.novel,
            None => &self.overall,
        }
    }
}

fn score_record(record: &ManifestRecord, result: Result<Classification, PipelineError>) -> RecordResult {
    let mut out = RecordResult {
        image_ref: record.image_ref.display().to_string(),
        ground_truth: record.ground_truth.clone(),
        split: record.split,
        predicted: None,
        correct: false,
        matched_by: None,
        note: None,
    };
    match result {
        Ok(c) => {
            out.predicted = c.predicted_label().map(|l| l.canonical_text.clone());
            out.correct = out.predicted.as_deref() == Some(record.ground_truth.as_str());
            out.matched_by = Some(c.trace.matched_by);
            if let Some(r) = &c.trace.refusal {
                out.note = Some(format!("refusal: {r}"));
            }
        }
        Err(e) => out.note = Some(e.to_string()),
    }
    out
}

/// Runs `classifier` over `records` with up to `jobs` worker threads.
/// Results come back in manifest order whatever the completion order.
/// Configuration errors abort the run; any other per-record failure is
/// recorded as an incorrect result with a note.
pub fn evaluate_with(classifier: &Classifier, records: &[ManifestRecord], jobs: usize) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Invalid("no records to evaluate".into()));
    }
    let dataset_id = records[0].dataset_id.clone();
    if let Some(other) = records.iter().find(|r| r.dataset_id != dataset_id) {
        return Err(EvalError::Invalid(format!(
            "records mix datasets {dataset_id:?} and {:?}; evaluate them separately",
            other.dataset_id
        )));
    }

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Classification, PipelineError>>>> =
        Mutex::new((0..records.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, records.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= records.len() {
                    break;
                }
                let result = classifier.classify(&records[i].image_ref);
                slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(result);
            });
        }
    });

    let mut per_record = Vec::with_capacity(records.len());
    for (record, slot) in records.iter().zip(slots.into_inner().unwrap_or_else(|p| p.into_inner())) {
        let result = slot.expect("every record was processed");
        if let Err(e) = &result {
            if e.is_config() {
                return Err(EvalError::Config(result.expect_err("checked")));
            }
        }
        per_record.push(score_record(record, result));
    }
    Ok(EvalReport::from_results(dataset_id, per_record))
}

/// Builds a classifier for `class_set` and evaluates `records` with it.
pub fn evaluate(
    records: &[ManifestRecord],
    class_set: &ClassLabelSet,
    config: &PipelineConfig,
    gateway: &Gateway,
    backend: Option<Arc<dyn EmbeddingBackend>>,
    jobs: usize,
) -> Result<EvalReport, EvalError> {
    let classifier =
        Classifier::new(config.clone(), class_set.clone(), gateway.clone(), backend).map_err(EvalError::Config)?;
    evaluate_with(&classifier, records, jobs)
}

/// Unweighted per-dataset means of each accuracy column. A column averages
/// over the datasets that report it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub datasets: Vec<String>,
    pub accuracy_base: Option<f64>,
    pub accuracy_novel: Option<f64>,
    pub accuracy_overall: Option<f64>,
}

// Running mean: identical inputs average to themselves exactly.
fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut acc: Option<f64> = None;
    for (k, v) in values.flatten().enumerate() {
        acc = Some(match acc {
            None => v,
            Some(m) => m + (v - m) / (k + 1) as f64,
        });
    }
    acc
}

impl AverageRow {
    fn over<'a>(rows: impl Iterator<Item = &'a EvalReport> + Clone) -> Self {
        Self {
            datasets: rows.clone().map(|r| r.dataset_id.clone()).collect(),
            accuracy_base: mean(rows.clone().map(|r| r.accuracy_base)),
            accuracy_novel: mean(rows.clone().map(|r| r.accuracy_novel)),
            accuracy_overall: mean(rows.map(|r| r.accuracy_overall)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub rows: Vec<EvalReport>,
    pub average_row: AverageRow,
    /// dataset id -> group name (e.g. `domain-generalization`).
    pub group_tags: BTreeMap<String, String>,
    pub group_averages: BTreeMap<String, AverageRow>,
}

pub fn aggregate(reports: Vec<EvalReport>, groups: &BTreeMap<String, String>) -> Result<AggregateReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Invalid("aggregate needs at least one report".into()));
    }
    let mut seen = BTreeSet::new();
    for r in &reports {
        if !seen.insert(r.dataset_id.clone()) {
            return Err(EvalError::DuplicateDataset(r.dataset_id.clone()));
        }
    }
    let group_tags: BTreeMap<String, String> = groups
        .iter()
        .filter(|(ds, _)| seen.contains(*ds))
        .map(|(d, g)| (d.clone(), g.clone()))
        .collect();
    let group_names: BTreeSet<&String> = group_tags.values().collect();
    let group_averages = group_names
        .into_iter()
        .map(|g| {
            let members = reports.iter().filter(|r| group_tags.get(&r.dataset_id) == Some(g));
            (g.clone(), AverageRow::over(members))
        })
        .collect();
    Ok(AggregateReport {
        average_row: AverageRow::over(reports.iter()),
        rows: reports,
        group_tags,
        group_averages,
    })
}

/// `2 * base * novel / (base + novel)`; both inputs must be positive.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64, EvalError> {
    if !(base > 0.0 && novel > 0.0) {
        return Err(EvalError::Invalid(format!("harmonic mean needs positive inputs, got {base} and {novel}")));
    }
    Ok(2.0 * base * novel / (base + novel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn result(split: Split, correct: bool, refused: bool) -> RecordResult {
        RecordResult {
            image_ref: "x".into(),
            ground_truth: "a".into(),
            split,
            predicted: correct.then(|| "a".to_string()),
            correct,
            matched_by: Some(if refused {
                MatchedBy::RefusalFallback
            } else {
                MatchedBy::SimilarityArgmax
            }),
            note: None,
        }
    }

    fn report(id: &str, overall: f64) -> EvalReport {
        let mut r = EvalReport::from_results(id, vec![result(Split::Novel, true, false)]);
        r.accuracy_overall = Some(overall);
        r.accuracy_novel = Some(overall);
        r
    }

    #[test]
    fn seven_of_ten() {
        let rs: Vec<_> = (0..10).map(|i| result(Split::Novel, i < 7, false)).collect();
        let r = EvalReport::from_results("d", rs);
        assert_eq!(r.accuracy_novel, Some(70.0));
        assert_eq!(r.accuracy_overall, Some(70.0));
        assert_eq!(r.accuracy_base, None);
    }

    #[test]
    fn aggregate_means() {
        let agg = aggregate(vec![report("a", 80.0), report("b", 90.0)], &BTreeMap::new()).unwrap();
        assert_eq!(agg.average_row.accuracy_overall, Some(85.0));
        assert_eq!(agg.average_row.accuracy_base, None);
        let single = aggregate(vec![report("a", 80.0)], &BTreeMap::new()).unwrap();
        assert_eq!(single.average_row.accuracy_overall, Some(80.0));
        assert!(matches!(
            aggregate(vec![report("a", 1.0), report("a", 2.0)], &BTreeMap::new()),
            Err(EvalError::DuplicateDataset(_))
        ));
        assert!(aggregate(vec![], &BTreeMap::new()).is_err());
    }

    #[test]
    fn group_sub_averages() {
        let groups: BTreeMap<String, String> = [
            ("imagenet-v2", "domain-generalization"),
            ("imagenet-sketch", "domain-generalization"),
            ("imagenet-r", "domain-generalization"),
            ("not-present", "other"),
        ]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        let reports = vec![
            report("imagenet", 70.0),
            report("imagenet-v2", 60.0),
            report("imagenet-sketch", 50.0),
            report("imagenet-r", 40.0),
        ];
        let agg = aggregate(reports, &groups).unwrap();
        let dg = &agg.group_averages["domain-generalization"];
        assert_eq!(dg.accuracy_overall, Some(50.0));
        assert_eq!(dg.datasets.len(), 3);
        assert!(!agg.group_averages.contains_key("other"));
        assert_eq!(agg.average_row.accuracy_overall, Some(55.0));
    }

    #[test]
    fn harmonic_mean_values() {
        assert_eq!(harmonic_mean(80.0, 80.0).unwrap(), 80.0);
        assert_eq!(harmonic_mean(80.0, 20.0).unwrap(), 32.0);
        // Closed form evaluated by hand: 2*76.81*83.44/160.25 = 79.989...
        assert!((harmonic_mean(76.81, 83.44).unwrap() - 79.99).abs() < 0.01);
        assert!(harmonic_mean(0.0, 50.0).is_err());
        assert!(harmonic_mean(50.0, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_of_identical_reports(acc in 0.0f64..100.0, n in 1usize..14) {
            let reports = (0..n).map(|i| report(&format!("d{i}"), acc)).collect();
            let agg = aggregate(reports, &BTreeMap::new()).unwrap();
            prop_assert_eq!(agg.average_row.accuracy_overall, Some(acc));
            prop_assert_eq!(agg.average_row.accuracy_novel, Some(acc));
        }

        #[test]
        fn counts_are_consistent_and_order_free(
            flags in proptest::collection::vec((any::<bool>(), any::<bool>(), any::<bool>()), 1..60),
            seed in any::<u64>(),
        ) {
            let rs: Vec<RecordResult> = flags
                .iter()
                .map(|&(novel, correct, refused)| {
                    let split = if novel { Split::Novel } else { Split::Base };
                    result(split, correct && !refused, refused)
                })
                .collect();
            let r = EvalReport::from_results("d", rs.clone());
            for c in [&r.base, &r.novel, &r.overall] {
                prop_assert_eq!(c.correct + c.incorrect(), c.total);
                prop_assert!(c.refusals <= c.incorrect());
            }
            prop_assert_eq!(r.base.total + r.novel.total, r.overall.total);

            let mut shuffled = rs;
            let n = shuffled.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            let r2 = EvalReport::from_results("d", shuffled);
            prop_assert_eq!(r.accuracy_base, r2.accuracy_base);
            prop_assert_eq!(r.accuracy_novel, r2.accuracy_novel);
            prop_assert_eq!(r.accuracy_overall, r2.accuracy_overall);
        }
    }
}
