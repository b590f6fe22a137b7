use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lmmclip::config::{Config, ProviderChoice};
use lmmclip::eval::{
    aggregate, evaluate_with, load_manifest_multi, read_report, render_table, write_aggregate, write_report,
    EvalReport, ManifestRecord,
};
use lmmclip::gateway::{read_fixture_file, record_fixtures, CacheStore, Gateway, LmmRequest};
use lmmclip::labels::{load_class_list, ClassLabelSet};
use lmmclip::pipeline::{Classifier, Outcome, PipelineMode};

use crate::errors::{CliError, EXIT_OTHER, EXIT_PROVIDER};
use crate::{CacheCmd, ClassifyArgs, EvalArgs, Globals, ReportArgs};

fn load_config(g: &Globals) -> Result<Config, CliError> {
    Ok(Config::load(g.config.as_deref(), &g.overrides)?)
}

fn classifier(config: &Config, labels: ClassLabelSet, gateway: Gateway) -> Result<Classifier, CliError> {
    let backend = config.build_backend()?;
    Ok(Classifier::new(config.pipeline_config()?, labels, gateway, backend)?)
}

fn split_pair<'a>(s: &'a str, what: &str) -> Result<(&'a str, &'a str), CliError> {
    s.split_once('=')
        .filter(|(k, v)| !k.is_empty() && !v.is_empty())
        .ok_or_else(|| CliError::config(format!("{what} {s:?} is not NAME=VALUE")))
}

/// `PATH` or `DATASET=PATH`, keyed by dataset id.
fn class_sets(specs: &[String]) -> Result<BTreeMap<String, ClassLabelSet>, CliError> {
    let mut sets = BTreeMap::new();
    for spec in specs {
        let (id, path) = match spec.split_once('=') {
            Some((id, path)) if !id.is_empty() => (Some(id), path),
            _ => (None, spec.as_str()),
        };
        let set = load_class_list(path)?;
        let set = match id {
            Some(id) => ClassLabelSet::new(id, set.labels().iter().map(|l| l.raw_text.clone()))?,
            None => set,
        };
        if sets.insert(set.dataset_id().to_string(), set).is_some() {
            return Err(CliError::config(format!("class list for dataset given twice: {spec}")));
        }
    }
    Ok(sets)
}

fn groups(specs: &[String]) -> Result<BTreeMap<String, String>, CliError> {
    specs
        .iter()
        .map(|s| split_pair(s, "group").map(|(d, g)| (d.to_string(), g.to_string())))
        .collect()
}

fn by_dataset(records: Vec<ManifestRecord>) -> BTreeMap<String, Vec<ManifestRecord>> {
    let mut out: BTreeMap<String, Vec<ManifestRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.dataset_id.clone()).or_default().push(r);
    }
    out
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |a| format!("{a:.2}"))
}

pub fn classify(g: &Globals, a: &ClassifyArgs) -> Result<(), CliError> {
    let config = load_config(g)?;
    let labels = load_class_list(&a.classes)?;
    let gateway = config.build_gateway()?;
    let c = classifier(&config, labels, gateway)?.classify(&a.image)?;
    match &c.outcome {
        Outcome::Label(p) => {
            println!("label: {}", p.predicted_label.canonical_text);
            println!("score: {:.6}", p.score);
        }
        Outcome::NonLabel => {
            println!("label: (none)");
            println!("score: -");
        }
    }
    if let Some(ex) = &c.trace.stage1_exchange {
        println!("stage1: {}", ex.answer_text);
    }
    if let Some(ex) = &c.trace.stage2_exchange {
        println!("stage2: {}", ex.answer_text);
    }
    println!("matched_by: {}", c.trace.matched_by);
    if let Some(r) = &c.trace.refusal {
        println!("refusal: {r}");
    }
    Ok(())
}

pub fn eval(g: &Globals, a: &EvalArgs) -> Result<(), CliError> {
    let config = load_config(g)?;
    let sets = class_sets(&a.classes)?;
    let groups = groups(&a.group)?;
    let records = load_manifest_multi(&a.manifest, &sets)?;
    let gateway = config.build_gateway()?;

    let mut reports = Vec::new();
    for (dataset, recs) in by_dataset(records) {
        let c = classifier(&config, sets[&dataset].clone(), gateway.clone())?;
        let report = evaluate_with(&c, &recs, g.jobs)?;
        let errors = report.per_record.iter().filter(|r| r.note.as_deref().is_some_and(|n| !n.starts_with("refusal"))).count();
        if errors > 0 {
            eprintln!("warning: {dataset}: {errors} record(s) failed; see per_record notes");
        }
        println!(
            "{dataset}: accuracy_base {} accuracy_novel {} accuracy_overall {} refusals {}",
            fmt_acc(report.accuracy_base),
            fmt_acc(report.accuracy_novel),
            fmt_acc(report.accuracy_overall),
            report.overall.refusals
        );
        if let Some(out) = &g.out {
            write_report(&report, dataset_dir(out, &dataset))?;
        }
        reports.push(report);
    }

    if reports.len() > 1 {
        let agg = aggregate(reports, &groups)?;
        println!(
            "average: accuracy_base {} accuracy_novel {} accuracy_overall {}",
            fmt_acc(agg.average_row.accuracy_base),
            fmt_acc(agg.average_row.accuracy_novel),
            fmt_acc(agg.average_row.accuracy_overall)
        );
        if let Some(out) = &g.out {
            write_aggregate(&agg, out)?;
        }
    }
    Ok(())
}

fn dataset_dir(out: &Path, dataset: &str) -> PathBuf {
    out.join(dataset)
}

pub fn record(g: &Globals, a: &EvalArgs) -> Result<(), CliError> {
    let config = load_config(g)?;
    if config.provider.kind != ProviderChoice::Live {
        return Err(CliError::config("record needs a live provider (--provider live)"));
    }
    let out = g
        .fixtures
        .clone()
        .ok_or_else(|| CliError::config("record needs --fixtures <PATH> for its output"))?;
    let sets = class_sets(&a.classes)?;
    let records = load_manifest_multi(&a.manifest, &sets)?;
    let gateway = config.build_gateway()?;
    let provider = gateway.provider().clone();

    let classifiers = by_dataset(records)
        .into_iter()
        .map(|(ds, recs)| Ok((classifier(&config, sets[&ds].clone(), gateway.clone())?, recs)))
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut stage1 = Vec::new();
    for (c, recs) in &classifiers {
        for r in recs {
            stage1.push(c.stage1_request(&r.image_ref)?);
        }
    }
    let first = record_fixtures(provider.as_ref(), &stage1, &out)?;
    println!("stage 1: {} recorded, {} refusals, {} failed", first.recorded, first.refusals, first.failed.len());

    let mut failed = first.failed.len();
    if config.pipeline.mode == PipelineMode::Tlac {
        let file = read_fixture_file(&out)?;
        let mut stage2: Vec<LmmRequest> = Vec::new();
        for (c, recs) in &classifiers {
            for r in recs {
                let key = c.stage1_request(&r.image_ref)?.key();
                if let Some(rec) = file.get(&key).filter(|rec| !rec.refusal) {
                    stage2.push(c.stage2_request(&r.image_ref, &rec.answer_text)?);
                }
            }
        }
        let second = record_fixtures(provider.as_ref(), &stage2, &out)?;
        println!("stage 2: {} recorded, {} refusals, {} failed", second.recorded, second.refusals, second.failed.len());
        failed += second.failed.len();
    }
    println!("wrote {}", out.display());
    if failed > 0 {
        return Err(CliError::new(EXIT_PROVIDER, format!("{failed} request(s) failed; see the .failures.json manifest")));
    }
    Ok(())
}

pub fn cache(action: &CacheCmd) -> Result<(), CliError> {
    match action {
        CacheCmd::Stats { dir } => {
            let s = CacheStore::open_existing(dir)?.stats()?;
            println!("{} records", s.records);
            println!("{} bytes", s.bytes);
        }
        CacheCmd::Verify { dir } => {
            let bad = CacheStore::open_existing(dir)?.verify()?;
            for (key, why) in &bad {
                println!("corrupt {key}: {why}");
            }
            println!("{} corrupt records", bad.len());
            if !bad.is_empty() {
                return Err(CliError::new(EXIT_OTHER, format!("{} corrupt record(s)", bad.len())));
            }
        }
        CacheCmd::Clear { dir, yes } => {
            if !yes {
                return Err(CliError::config("refusing to clear without --yes"));
            }
            let n = CacheStore::open_existing(dir)?.clear()?;
            println!("removed {n} records");
        }
    }
    Ok(())
}

pub fn report(g: &Globals, a: &ReportArgs) -> Result<(), CliError> {
    let reports = a.reports.iter().map(read_report).collect::<Result<Vec<EvalReport>, _>>()?;
    let agg = aggregate(reports, &groups(&a.group)?)?;
    let group_rows: Vec<(&str, _)> = agg.group_averages.iter().map(|(k, v)| (k.as_str(), v)).collect();
    print!("{}", render_table(&agg.rows, Some(&agg.average_row), &group_rows));
    if let Some(out) = &g.out {
        write_aggregate(&agg, out)?;
    }
    Ok(())
}
