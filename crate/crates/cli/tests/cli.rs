use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coteach_cli::manifest::RunManifest;

const SMALL: &str = r#"{
  "dataset": {"generate": {"num_classes": 3, "n_source": 200, "n_target": 200, "n_test": 100}},
  "train": {"epochs": 3, "hidden": [8]},
  "seeds": [0, 1],
  "methods": ["source", "uda_mmd", "kdde", "ct"]
}"#;

fn coteach(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coteach"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn gen_is_deterministic_and_seed_flag_wins() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    for (seed, name) in [("3", "a.csv"), ("3", "b.csv"), ("4", "c.csv")] {
        ok(&coteach(d, &["--config", cfg, "--seed", seed, "gen", "--out", name]));
    }
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
    assert!(d.join("a.csv.meta.json").exists());
}

#[test]
fn invalid_ambiguity_rate_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"dataset": {"generate": {"ambiguity_rate": 0.5}}}"#).unwrap();
    let out = coteach(dir.path(), &["--config", cfg.to_str().unwrap(), "gen", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ambiguity_rate"));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
    let out = coteach(dir.path(), &["--config", cfg.to_str().unwrap(), "pipeline"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn distillation_without_teachers_is_rejected() {
    let (dir, cfg) = setup();
    let out = coteach(dir.path(), &["--config", cfg.to_str().unwrap(), "pipeline", "--methods", "kdde,ct"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("methods"));
}

#[test]
fn pipeline_reruns_and_resumes_identically() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    ok(&coteach(d, &["--config", cfg, "--out", "a", "pipeline"]));
    ok(&coteach(d, &["--config", cfg, "--out", "b", "--jobs", "2", "pipeline"]));
    let agg = |run: &str| std::fs::read(d.join(run).join("aggregate.csv")).unwrap();
    assert_eq!(agg("a"), agg("b"));
    for f in ["seed-0/ct.ckpt.json", "seed-1/kdde.log.csv", "seed-1/dataset.csv"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }

    // lose one checkpoint and tamper with another, then resume
    std::fs::remove_file(d.join("a/seed-0/ct.ckpt.json")).unwrap();
    let tampered = d.join("a/seed-1/kdde.ckpt.json");
    let mut text = std::fs::read_to_string(&tampered).unwrap();
    text.push(' ');
    std::fs::write(&tampered, text).unwrap();
    ok(&coteach(d, &["--config", cfg, "--out", "a", "--resume", "pipeline"]));
    assert_eq!(agg("a"), agg("b"));
    let m = RunManifest::load(&d.join("a/manifest.json")).unwrap();
    m.verify(&d.join("a")).unwrap();
    let resumed = |seed: u64, stage: &str| {
        m.stages.iter().find(|s| s.seed == seed && s.stage == stage).unwrap().resumed
    };
    assert!(resumed(0, "source") && resumed(0, "kdde") && resumed(1, "ct"));
    assert!(!resumed(0, "ct"));
    assert!(!resumed(1, "kdde"));
}

#[test]
fn manifest_lists_every_written_file() {
    let (dir, cfg) = setup();
    let d = dir.path();
    ok(&coteach(d, &["--config", cfg.to_str().unwrap(), "--out", "run", "pipeline"]));
    let m = RunManifest::load(&d.join("run/manifest.json")).unwrap();
    let listed: std::collections::BTreeSet<String> = m.artifacts.iter().map(|a| a.path.clone()).collect();
    let mut stack = vec![d.join("run")];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(d.join("run")).unwrap().to_string_lossy().replace('\\', "/");
            if rel != "manifest.json" {
                assert!(listed.contains(&rel), "{rel} not in manifest");
            }
        }
    }
}

#[test]
fn report_renders_and_refuses_broken_digests() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    ok(&coteach(d, &["--config", cfg, "--out", "multi", "pipeline"]));
    ok(&coteach(d, &["--config", cfg, "--out", "single", "--seed", "5", "pipeline"]));

    let multi = ok(&coteach(d, &["report", "multi/manifest.json"]));
    assert!(multi.contains("±"));
    assert!(multi.contains("kdde") && multi.contains("Expanded %"));
    let svg = std::fs::read_to_string(d.join("multi/report.svg")).unwrap();
    assert!(svg.starts_with("<svg"));

    let single = ok(&coteach(d, &["report", "single/manifest.json", "--svg", "one.svg"]));
    assert!(!single.contains("±"), "{single}");
    assert!(d.join("one.svg").exists());
    // pure function of the files
    assert_eq!(single, ok(&coteach(d, &["report", "single/manifest.json", "--svg", "one.svg"])));

    std::fs::write(d.join("multi/seed-1/summary.json"), "{}").unwrap();
    let out = coteach(d, &["report", "multi/manifest.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed-1/summary.json"));

    std::fs::remove_file(d.join("single/aggregate.csv")).unwrap();
    let out = coteach(d, &["report", "single/manifest.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("aggregate.csv"));
}

#[test]
fn ablation_table_is_sorted_and_reportable() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    ok(&coteach(
        d,
        &["--config", cfg, "--out", "abl", "ablate-gamma", "--setting", "fixed:1", "--setting", "beta:10,1"],
    ));
    let text = std::fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    let keys: Vec<(String, String)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(l.as_bytes());
            let rec = r.records().next().unwrap().unwrap();
            (rec[0].to_string(), rec[1].to_string())
        })
        .collect();
    let want: Vec<(String, String)> = [
        ("fixed 1", "0"),
        ("fixed 1", "1"),
        ("fixed 1", "mean"),
        ("Beta(10,1)", "0"),
        ("Beta(10,1)", "1"),
        ("Beta(10,1)", "mean"),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    assert_eq!(keys, want);
    let report = ok(&coteach(d, &["report", "abl/ablation_manifest.json"]));
    assert!(report.contains("Beta(10,1)"));

    let bad = coteach(d, &["--config", cfg, "ablate-gamma", "--setting", "beta:0,1"]);
    assert!(!bad.status.success());
}
