use std::path::Path;
use std::process::{Command, Output};

fn zoomseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zoomseg")).args(args).output().expect("binary runs")
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name).display().to_string()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> =
        std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn simulate_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = zoomseg(&["simulate", "--n", "100", "--seed", "7", "--out", d.path().to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("100.0/100.0"));
    }
    let names = files(a.path());
    assert_eq!(names, files(b.path()));
    for n in
        ["manifest.jsonl", "predictions.jsonl", "traces.jsonl", "report.json", "report.txt", "report.csv", "run.json"]
    {
        assert!(names.contains(&n.to_string()), "missing {n}");
    }
    for n in &names {
        assert_eq!(read(a.path(), n), read(b.path(), n), "{n} differs");
    }
    assert!(read(a.path(), "run.json").contains("\"seed\": 7"));
    assert!(read(a.path(), "report.json").contains("\"seed\": 7"));
}

#[test]
fn simulate_then_evaluate_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().to_str().unwrap();
    assert!(zoomseg(&["simulate", "--n", "30", "--seed", "3", "--out", p]).status.success());
    let e = tempfile::tempdir().unwrap();
    let out = zoomseg(&[
        "evaluate",
        "--predictions",
        &format!("{p}/predictions.jsonl"),
        "--manifest",
        &format!("{p}/manifest.jsonl"),
        "--seed",
        "3",
        "--format",
        "json",
        "--out",
        e.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(e.path(), "report.json"), read(d.path(), "report.json"));
}

#[test]
fn evaluate_with_mismatched_ids_exits_1() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().to_str().unwrap();
    assert!(zoomseg(&["simulate", "--n", "5", "--seed", "1", "--out", p]).status.success());
    let preds = read(d.path(), "predictions.jsonl");
    let mut lines: Vec<String> = preds.lines().skip(1).map(str::to_string).collect();
    lines.push(lines[0].replacen("synth-", "stray-", 1));
    let bad = d.path().join("bad.jsonl");
    std::fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let out =
        zoomseg(&["evaluate", "--predictions", bad.to_str().unwrap(), "--manifest", &format!("{p}/manifest.jsonl")]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing prediction: synth-000000"), "{err}");
    assert!(err.contains("unknown prediction: stray-"), "{err}");
}

#[test]
fn reward_audit_matches_golden() {
    let d = tempfile::tempdir().unwrap();
    let out = zoomseg(&[
        "reward-audit",
        &fixture("rollout_log.jsonl"),
        "--advantages",
        "--seed",
        "5",
        "--out",
        d.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let want = std::fs::read_to_string(fixture("audit_expected.jsonl")).unwrap();
    let got = read(d.path(), "audit.jsonl");
    for (i, (g, w)) in got.lines().zip(want.lines()).enumerate() {
        assert_eq!(g, w, "line {}", i + 1);
    }
    assert_eq!(got, want);
    assert_eq!(
        read(d.path(), "advantages.jsonl"),
        std::fs::read_to_string(fixture("advantages_expected.jsonl")).unwrap()
    );
}

#[test]
fn validate_dataset_reports_findings() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().to_str().unwrap();
    assert!(zoomseg(&["synth", "--n", "4", "--out", p]).status.success());
    let manifest = d.path().join("manifest.jsonl");
    let ok = zoomseg(&["validate-dataset", manifest.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
    let mut text = std::fs::read_to_string(&manifest).unwrap();
    text.push_str("{\"id\": \"broken\"}\n");
    let first = text.lines().next().unwrap().to_string();
    text.push_str(&first);
    text.push('\n');
    std::fs::write(&manifest, text).unwrap();
    let out = zoomseg(&["validate-dataset", manifest.to_str().unwrap(), "--out", p]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("line 5"), "{stdout}");
    assert!(stdout.contains("duplicate id"), "{stdout}");
    assert_eq!(read(d.path(), "findings.jsonl").lines().count(), 2);
}

#[test]
fn stats_and_label_regions_with_mocks() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().to_str().unwrap();
    assert!(zoomseg(&["synth", "--n", "12", "--seed", "2", "--out", p]).status.success());
    let m = format!("{p}/manifest.jsonl");
    let out = zoomseg(&["stats", &m, "--out", p]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("task,attribute,size,spatial,split,count,fraction\n"));
    assert!(read(d.path(), "stats.json").contains("\"total\": 12"));

    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let out = zoomseg(&["label-regions", &m, "--mock", "--seed", "9", "--out", dir.path().to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let labels = read(a.path(), "labels.jsonl");
    assert_eq!(labels, read(b.path(), "labels.jsonl"));
    assert_eq!(labels.lines().count(), 12);
    assert!(labels.lines().all(|l| l.contains("\"provenance\":\"lpr\"")));
}

#[test]
fn run_pipeline_with_mocks() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().to_str().unwrap();
    assert!(zoomseg(&["synth", "--n", "6", "--out", p]).status.success());
    let out = zoomseg(&["run-pipeline", &format!("{p}/manifest.jsonl"), "--mock", "--concurrency", "2", "--out", p]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(d.path(), "predictions.jsonl").lines().count(), 6);
    assert_eq!(read(d.path(), "traces.jsonl").lines().count(), 6);
    assert!(read(d.path(), "run.json").contains("\"concurrency_cap\": 2"));
}

#[test]
fn run_pipeline_without_backend_is_operational_error() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().to_str().unwrap();
    assert!(zoomseg(&["synth", "--n", "2", "--out", p]).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_zoomseg"))
        .args(["run-pipeline", &format!("{p}/manifest.jsonl")])
        .env_remove("ZOOMSEG_POLICY_URL")
        .env_remove("ZOOMSEG_SEG_URL")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(zoomseg(&["no-such-command"]).status.code(), Some(64));
    assert_eq!(zoomseg(&["simulate", "--bogus"]).status.code(), Some(64));
    assert_eq!(zoomseg(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_and_overrides() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("engine.toml");
    std::fs::write(&cfg, "[metrics]\novqa_thresh = 0.9\n").unwrap();
    let p = d.path().to_str().unwrap();
    let out = zoomseg(&[
        "simulate",
        "--n",
        "3",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "grpo.kl_coeff=0.02",
        "--out",
        p,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = read(d.path(), "run.json");
    assert!(run.contains("\"ovqa_thresh\": 0.9"), "{run}");
    assert!(run.contains("\"kl_coeff\": 0.02"), "{run}");
    let bad = zoomseg(&["simulate", "--n", "3", "--set", "grpo.nope=1"]);
    assert_eq!(bad.status.code(), Some(2));
}
