//! Report files: full JSON, a CSV summary, and a plain-text Base/Novel table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{harmonic_mean, AggregateReport, AverageRow, EvalError, EvalReport, SplitCounts};

pub const REPORT_JSON: &str = "report.json";
pub const AGGREGATE_JSON: &str = "aggregate.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const TABLE_TXT: &str = "table.txt";

const CSV_HEADER: [&str; 6] = ["dataset", "split", "total", "correct", "refusals", "accuracy"];

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io(format!("{}: {e}", path.display()))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn hm(base: Option<f64>, novel: Option<f64>) -> Option<f64> {
    harmonic_mean(base?, novel?).ok()
}

fn summary_csv(rows: &[EvalReport], average: Option<&AverageRow>) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| EvalError::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        let splits: [(&str, &SplitCounts, Option<f64>); 3] = [
            ("base", &r.base, r.accuracy_base),
            ("novel", &r.novel, r.accuracy_novel),
            ("all", &r.overall, r.accuracy_overall),
        ];
        for (name, c, acc) in splits {
            w.write_record([
                r.dataset_id.as_str(),
                name,
                &c.total.to_string(),
                &c.correct.to_string(),
                &c.refusals.to_string(),
                &acc.map(|a| format!("{a:.2}")).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
    }
    // Averages carry accuracy only; counts are not meaningful across datasets.
    if let Some(avg) = average {
        for (name, acc) in [
            ("base", avg.accuracy_base),
            ("novel", avg.accuracy_novel),
            ("all", avg.accuracy_overall),
        ] {
            w.write_record(["average", name, "", "", "", &acc.map(|a| format!("{a:.2}")).unwrap_or_default()])
                .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn table_line(out: &mut String, name: &str, base: Option<f64>, novel: Option<f64>, all: Option<f64>, refusals: &str) {
    let _ = writeln!(
        out,
        "{name:<24} {:>8} {:>8} {:>8} {:>8} {refusals:>9}",
        pct(base),
        pct(novel),
        pct(hm(base, novel)),
        pct(all)
    );
}

/// Renders rows (and optional averages) as a fixed-width text table.
pub fn render_table(rows: &[EvalReport], average: Option<&AverageRow>, groups: &[(&str, &AverageRow)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>8} {:>8} {:>8} {:>8} {:>9}",
        "Dataset", "Base", "Novel", "HM", "Overall", "Refusals"
    );
    let width = 24 + 9 * 4 + 10;
    out.push_str(&"-".repeat(width));
    out.push('\n');
    for r in rows {
        table_line(
            &mut out,
            &r.dataset_id,
            r.accuracy_base,
            r.accuracy_novel,
            r.accuracy_overall,
            &r.overall.refusals.to_string(),
        );
    }
    if average.is_some() || !groups.is_empty() {
        out.push_str(&"-".repeat(width));
        out.push('\n');
    }
    if let Some(a) = average {
        table_line(&mut out, "Average", a.accuracy_base, a.accuracy_novel, a.accuracy_overall, "");
    }
    for (name, a) in groups {
        table_line(&mut out, &format!("Average [{name}]"), a.accuracy_base, a.accuracy_novel, a.accuracy_overall, "");
    }
    out
}

fn write_files(dir: &Path, json_name: &str, json: String, csv: String, table: String) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    for (name, body) in [(json_name, json), (SUMMARY_CSV, csv), (TABLE_TXT, table)] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))?;
        written.push(p);
    }
    Ok(written)
}

pub fn write_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, EvalError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    let csv = summary_csv(std::slice::from_ref(report), None)?;
    let table = render_table(std::slice::from_ref(report), None, &[]);
    write_files(dir.as_ref(), REPORT_JSON, json, csv, table)
}

pub fn write_aggregate(agg: &AggregateReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, EvalError> {
    let json = serde_json::to_string_pretty(agg).expect("aggregate serializes");
    let csv = summary_csv(&agg.rows, Some(&agg.average_row))?;
    let groups: Vec<(&str, &AverageRow)> = agg.group_averages.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let table = render_table(&agg.rows, Some(&agg.average_row), &groups);
    write_files(dir.as_ref(), AGGREGATE_JSON, json, csv, table)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

pub fn read_aggregate(path: impl AsRef<Path>) -> Result<AggregateReport, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}
