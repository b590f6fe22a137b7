use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lmmclip::config::SCHEMA;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn lmmclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmmclip"))
        .args(args)
        .env_remove("GEMINI_API_KEY")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: PathBuf) -> String {
    path.display().to_string()
}

fn mismatch(rest: &[&str], mode: &str) -> Output {
    let f = fixtures().join("mismatch");
    let fx = p(f.join("fixtures.jsonl"));
    let manifest = p(f.join("manifest.jsonl"));
    let classes = p(f.join("mismatch.txt"));
    let mut args = vec!["--fixtures", &fx, "--pipeline.mode", mode, "eval", "--manifest", &manifest, "--classes", &classes];
    args.extend_from_slice(rest);
    lmmclip(&args)
}

#[test]
fn classify_red_car() {
    let f = fixtures().join("redcar");
    let o = lmmclip(&[
        "--fixtures",
        &p(f.join("fixtures.jsonl")),
        "classify",
        "--image",
        &p(f.join("red_car.png")),
        "--classes",
        &p(f.join("vehicles.txt")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("label: red car"), "{out}");
    assert!(out.contains("score: 0.276026"));
    assert!(out.contains("stage1: The image shows red sports car"));
}

#[test]
fn classify_two_stage_prints_both_answers() {
    let f = fixtures().join("mismatch");
    let o = lmmclip(&[
        "--set",
        "pipeline.mode=tlac",
        "--fixtures",
        &p(f.join("fixtures.jsonl")),
        "classify",
        "--image",
        &p(f.join("images/gaillardia.png")),
        "--classes",
        &p(f.join("mismatch.txt")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("label: blanket flower"));
    assert!(out.contains("stage1: Gaillardia"));
    assert!(out.contains("stage2: Blanket Flower"));
}

#[test]
fn missing_class_list_is_a_config_error() {
    let f = fixtures().join("redcar");
    let missing = p(f.join("no-such-classes.txt"));
    let o = lmmclip(&[
        "--fixtures",
        &p(f.join("fixtures.jsonl")),
        "classify",
        "--image",
        &p(f.join("red_car.png")),
        "--classes",
        &missing,
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&missing));
}

#[test]
fn fixture_miss_exit_code() {
    let o = lmmclip(&[
        "--fixtures",
        &p(fixtures().join("mismatch/fixtures.jsonl")),
        "classify",
        "--image",
        &p(fixtures().join("redcar/red_car.png")),
        "--classes",
        &p(fixtures().join("redcar/vehicles.txt")),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn live_provider_without_network_exit_code() {
    let f = fixtures().join("redcar");
    let o = Command::new(env!("CARGO_BIN_EXE_lmmclip"))
        .args([
            "--provider",
            "live",
            "--set",
            "provider.credential_ref=LMMCLIP_TEST_KEY",
            "classify",
            "--image",
            &p(f.join("red_car.png")),
            "--classes",
            &p(f.join("vehicles.txt")),
        ])
        .env("LMMCLIP_TEST_KEY", "k")
        .env("NO_NETWORK", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = lmmclip(&["--provider", "live", "classify", "--image", "x.png", "--classes", &p(f.join("vehicles.txt"))]);
    assert_eq!(o.status.code(), Some(2), "missing credential: {}", stderr(&o));
}

#[test]
fn bad_overrides_are_config_errors() {
    let f = fixtures().join("redcar");
    for bad in ["pipeline.nope=1", "provider.burst=lots", "novalue"] {
        let o = lmmclip(&[
            "--set",
            bad,
            "--fixtures",
            &p(f.join("fixtures.jsonl")),
            "classify",
            "--image",
            &p(f.join("red_car.png")),
            "--classes",
            &p(f.join("vehicles.txt")),
        ]);
        assert_eq!(o.status.code(), Some(2), "{bad}: {}", stderr(&o));
    }
}

#[test]
fn eval_mismatch_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fresh/reports");
    let o = mismatch(&["--out", &p(out.clone())], "tlac");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("accuracy_novel 100.00"), "{}", stdout(&o));
    for f in ["report.json", "summary.csv", "table.txt"] {
        assert!(out.join("mismatch").join(f).is_file(), "{f}");
    }

    let o = mismatch(&[], "lmm-only");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("accuracy_overall 0.00"), "{}", stdout(&o));
}

#[test]
fn report_reaggregates() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert_eq!(mismatch(&["--out", &p(a.clone())], "tlac").status.code(), Some(0));
    // A second dataset id over the same class list.
    let f = fixtures().join("mismatch");
    let manifest = dir.path().join("m2.jsonl");
    let text = fs::read_to_string(f.join("manifest.jsonl"))
        .unwrap()
        .replace("\"images/", &format!("\"{}/images/", f.display()))
        .replace("\"dataset\":\"mismatch\"", "\"dataset\":\"other\"");
    fs::write(&manifest, text).unwrap();
    let b = dir.path().join("b");
    let o = lmmclip(&[
        "--fixtures",
        &p(f.join("fixtures.jsonl")),
        "eval",
        "--manifest",
        &p(manifest),
        "--classes",
        &format!("other={}", p(f.join("mismatch.txt"))),
        "--out",
        &p(b.clone()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let agg = dir.path().join("agg");
    let o = lmmclip(&[
        "--out",
        &p(agg.clone()),
        "report",
        &p(a.join("mismatch/report.json")),
        &p(b.join("other/report.json")),
        "--group",
        "other=fine-grained",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("Average"));
    assert!(table.contains("fine-grained"));
    let csv = fs::read_to_string(agg.join("summary.csv")).unwrap();
    assert!(csv.contains("average,all,,,,50.00"), "{csv}");
}

#[test]
fn cache_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    fs::create_dir(&cache).unwrap();
    let c = p(cache.clone());
    let o = lmmclip(&["cache", "stats", "--dir", &c]);
    assert!(stdout(&o).contains("0 records"));

    let o = mismatch(&["--set", "cache.enabled=true", "--cache.dir", &c], "slac");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = lmmclip(&["cache", "stats", "--dir", &c]);
    assert!(stdout(&o).contains("4 records"), "{}", stdout(&o));

    // Flip one byte of one record's answer.
    let victim = fs::read_dir(&cache).unwrap().next().unwrap().unwrap().path();
    let mut bytes = fs::read(&victim).unwrap();
    let at = String::from_utf8_lossy(&bytes).find("\"answer_text\":\"").unwrap() + 15;
    bytes[at] ^= 0x01;
    fs::write(&victim, bytes).unwrap();
    let o = lmmclip(&["cache", "verify", "--dir", &c]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("1 corrupt records"), "{out}");
    assert!(out.contains(victim.file_stem().unwrap().to_str().unwrap()));

    assert_eq!(lmmclip(&["cache", "clear", "--dir", &c]).status.code(), Some(2));
    let o = lmmclip(&["cache", "clear", "--dir", &c, "--yes"]);
    assert!(stdout(&o).contains("removed 4 records"));
    assert!(stdout(&lmmclip(&["cache", "stats", "--dir", &c])).contains("0 records"));
    assert_ne!(lmmclip(&["cache", "stats", "--dir", &p(dir.path().join("missing"))]).status.code(), Some(0));
}

#[test]
fn help_lists_every_config_key() {
    let o = lmmclip(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let help = stdout(&o);
    for (key, _, _) in SCHEMA {
        assert!(help.contains(&format!("--{key}")), "--help is missing {key}");
    }
}

#[test]
fn record_requires_live_provider() {
    let f = fixtures().join("mismatch");
    let o = lmmclip(&[
        "--fixtures",
        "/tmp/never.jsonl",
        "record",
        "--manifest",
        &p(f.join("manifest.jsonl")),
        "--classes",
        &p(f.join("mismatch.txt")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
