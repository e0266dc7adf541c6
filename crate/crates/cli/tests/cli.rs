use std::path::Path;
use std::process::{Command, Output};

use attnlimit_cli::samplefile::read_samples;

fn attnlimit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnlimit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = attnlimit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_compare_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let finite = dir.path().join("finite.awls");
    let limit = dir.path().join("limit.awls");
    let stdout = ok(&[
        "simulate-finite",
        "--width",
        "64",
        "--samples",
        "500",
        "--seed",
        "4",
        "--out",
        path(&finite),
    ]);
    let summary: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["count"], 500);
    assert!(summary["moments"]["variance"].as_f64().unwrap() > 0.0);
    assert_eq!(read_samples(&finite).unwrap().len(), 500);

    // Same seed, same bytes.
    let again = dir.path().join("again.awls");
    ok(&[
        "--threads",
        "2",
        "simulate-finite",
        "--width",
        "64",
        "--samples",
        "500",
        "--seed",
        "4",
        "--out",
        path(&again),
    ]);
    assert_eq!(
        std::fs::read(&finite).unwrap(),
        std::fs::read(&again).unwrap()
    );

    ok(&[
        "sample-limit",
        "--samples",
        "500",
        "--seed",
        "5",
        "--out",
        path(&limit),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&ok(&["compare", path(&finite), path(&limit)])).unwrap();
    let ks = report["ks_statistic"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ks));
    assert!(report["kl"].as_f64().unwrap() >= 0.0);

    let svg = dir.path().join("overlay.svg");
    ok(&[
        "plot",
        "--finite",
        &format!("{}=n = 64", path(&finite)),
        "--limit",
        path(&limit),
        "--out",
        path(&svg),
    ]);
    let doc = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(doc.matches("<polyline").count(), 2);
    assert!(doc.contains("n = 64"));
}

#[test]
fn score_sampling_under_both_scalings() {
    let var = |scaling: &str| {
        let out = ok(&[
            "simulate-finite",
            "--score",
            "--scaling",
            scaling,
            "--samples",
            "2000",
        ]);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        v["moments"]["variance"].as_f64().unwrap()
    };
    assert!(var("inv_sqrt_width") > 0.5);
    assert!(var("inv_width") < 0.05);
}

#[test]
fn custom_experiment_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let stdout = ok(&[
        "experiment",
        "custom",
        "--widths",
        "16,64",
        "--heads",
        "1",
        "--samples",
        "400",
        "--trials",
        "2",
        "--write-samples",
        "--output-dir",
        path(&out),
    ]);
    assert!(stdout.contains("custom"));
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "experiment,width,heads,trial,kl,log_kl,ks,mean,var,skew,ex_kurtosis,seed"
    );
    assert_eq!(lines.count(), 4);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["samples_per_run"], 400);
    assert!(out.join("custom_h1.svg").exists());
    assert!(std::fs::read_dir(out.join("samples")).unwrap().count() >= 4);
}

#[test]
fn experiment_reads_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "experiment": "custom",
            "widths": [32],
            "heads": [2],
            "samples_per_run": 300,
            "trials": 1,
            "master_seed": 9,
            "emit_svg": false,
        })
        .to_string(),
    )
    .unwrap();
    ok(&[
        "experiment",
        "custom",
        "--config",
        path(&config),
        "--output-dir",
        path(&out),
    ]);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["master_seed"], 9);
    assert!(!out.join("custom_h2.svg").exists());
}

#[test]
fn selfcheck_passes() {
    let stdout = ok(&["selfcheck"]);
    assert!(stdout.contains("PASS"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn bad_input_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.awls");
    std::fs::write(&junk, b"not a sample file").unwrap();
    let out = attnlimit(&["compare", path(&junk), path(&junk)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    assert!(!attnlimit(&["simulate-finite", "--width", "0"])
        .status
        .success());
    assert!(!attnlimit(&["experiment", "fig9"]).status.success());
    assert!(!attnlimit(&["plot", "--out", "x.svg"]).status.success());
}
