use std::fs;
use std::process::{Command, Output};

fn calm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calm")).args(args).output().expect("spawn calm")
}

#[test]
fn sweep_writes_results_with_the_expected_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = calm(&[
        "sweep", "--regime", "baseline", "--factor", "n_r", "--values", "80,120", "--methods", "naive,racer",
        "--reps", "2", "--seed", "5", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(lines.next().unwrap(), "regime,factor,factor_value,method,replicate,seed,n_r,n_o,rmse,fit_seconds");
    assert_eq!(lines.count(), 2 * 2 * 2);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 2);
    assert!(out.join("manifest.json").exists());
    assert!(out.join("diagnostics.jsonl").exists());
}

#[test]
fn run_one_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"dgp": {"regime": "baseline"}, "methods": ["Naive"], "n_reps": 1, "replicates": 2}"#).unwrap();
    let o = calm(&["run-one", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("replicates"));
}

#[test]
fn run_one_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.json");
    fs::write(&cfg, r#"{"dgp": {"regime": "baseline", "n_r": 100}, "methods": ["Naive", "MrOscar"], "n_reps": 2, "base_seed": 9}"#).unwrap();
    let rmse = |name: &str| {
        let out = dir.path().join(name);
        let o = calm(&["run-one", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(out.join("results.csv"))
            .unwrap()
            .lines()
            .map(|l| l.split(',').nth(8).unwrap().to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(rmse("a"), rmse("b"));
}

#[test]
fn grid_subcommand_enumerates_every_setting() {
    let dir = tempfile::tempdir().unwrap();
    let o = calm(&["paper-grid", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("12 sweeps, 52 settings"));
    let index: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("grid.json")).unwrap()).unwrap();
    assert_eq!(index.as_array().unwrap().len(), 12);
    assert!(dir.path().join("latent_omega.json").exists());
}

#[test]
fn verify_unit_suite_passes() {
    let o = calm(&["verify", "--suite", "unit"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert_eq!(stdout.matches("[PASS]").count(), 4);
}

#[test]
fn bad_arguments_fail_cleanly() {
    assert!(!calm(&["sweep", "--regime", "mars", "--out", "x"]).status.success());
    assert!(!calm(&["sweep", "--factor", "omega", "--values", "1", "--reps", "1", "--out", "/tmp/calm-never"]).status.success());
}
