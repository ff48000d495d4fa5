use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dbmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbmd"))
        .args(args)
        .env("DBMD_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dbmd(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fit_on_tiny_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("x.csv");
    let rows: Vec<String> = (0..12)
        .map(|j| {
            let t = j as f64 / 11.0;
            format!("{},{},{},{}", 1.0 - t, t, 0.5 + 0.1 * t, 0.3 * (1.0 - t))
        })
        .collect();
    fs::write(&data, format!("f1,f2,f3,f4\n{}\n", rows.join("\n"))).unwrap();
    let metrics = dir.path().join("m.json");
    ok(&["fit", "--data", s(&data), "--workers", "1", "--rank", "2", "--metrics-out", s(&metrics)]);
    let json: Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(json["schema"], "dbmd/1");
    let objectives: Vec<f64> = json["runs"][0]["objectives"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(!objectives.is_empty());
    assert!(objectives.windows(2).all(|w| w[1] <= w[0] + 1e-8), "{objectives:?}");
}

#[test]
fn synth_fit_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&["synth", "--out", s(&out), "--rank", "3", "--shards", "2", "--n-c", "60", "--alpha0", "0.3", "--seed", "4"]);
    for f in ["shard_0.csv", "shard_1.csv", "data.csv", "basis.csv", "labels.txt", "synth.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let labels = out.join("labels.txt");
    assert_eq!(fs::read_to_string(&labels).unwrap().lines().count(), 120);

    let pred = dir.path().join("pred.txt");
    let metrics = dir.path().join("m.json");
    ok(&[
        "fit", "--data", s(&out.join("shard_0.csv")), s(&out.join("shard_1.csv")),
        "--workers", "2", "--rank", "3", "--solver", "cease", "--gamma", "1", "--alpha0", "1,1,1",
        "--labels", s(&labels), "--predictions-out", s(&pred), "--metrics-out", s(&metrics),
        "--repeats", "2", "--max-outer", "30", "--weighted",
    ]);
    let json: Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(json["runs"].as_array().unwrap().len(), 2);
    assert_eq!(json["runs"][1]["seed"], 1);
    assert!(json["accuracy_mean"].as_f64().unwrap() > 0.5);
    assert_eq!(fs::read_to_string(&pred).unwrap().lines().count(), 120);

    let out = ok(&["eval", "--pred", s(&labels), "--truth", s(&labels)]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "1.0");
}

#[test]
fn binary_data_with_partitioning() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&["synth", "--out", s(&out), "--rank", "2", "--shards", "1", "--n-c", "40", "--sigma", "0.05", "--format", "bin"]);
    let metrics = dir.path().join("m.json");
    ok(&[
        "fit", "--data", s(&out.join("data.bin")), "--workers", "3", "--rank", "2", "--solver", "agd",
        "--partition", "strided", "--lambda", "0.01", "--labels", s(&out.join("labels.txt")),
        "--metrics-out", s(&metrics), "--max-outer", "10",
    ]);
    let json: Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(json["workers"], 3);
    assert_eq!(json["solver"], "agd");
}

#[test]
fn varratio_writes_one_row_per_noise_level() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("v.csv");
    ok(&["varratio", "--solver", "cease", "--reps", "4", "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("s,theoretical,empirical"), "{header}");
    let s_values: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(s_values, (1..=10).map(f64::from).collect::<Vec<_>>());
}

#[test]
fn convergence_writes_per_round_objectives() {
    let out = ok(&["convergence", "--solver", "cease,agd", "--prior", "dirichlet", "--n-c", "30", "--gamma", "1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("solver,n_c,iteration,objective"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.iter().any(|r| r[0] == "cease"));
    assert!(rows.iter().filter(|r| r[0] == "agd").count() >= 30);
    assert!(rows.iter().all(|r| r[1] == "30" && r[3].parse::<f64>().is_ok()));
}

#[test]
fn bad_arguments_fail_with_the_flag_name() {
    let out = dbmd(&["fit", "--data", "x.csv", "--rank", "two"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--rank"));

    let out = dbmd(&["fit", "--data", "x.csv", "--rank", "2", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = dbmd(&["fit", "--data", "x.csv", "--rank", "2", "--solver", "sgd"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--solver"));

    let out = dbmd(&["eval", "--pred", "/nonexistent/a", "--truth", "/nonexistent/b"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    assert!(!dbmd(&["frobnicate"]).status.success());
}
