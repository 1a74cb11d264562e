use std::path::Path;
use std::process::{Command, Output};

fn advprune(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advprune"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("ADVPRUNE_OUT")
        .env_remove("ADVPRUNE_JOBS")
        .output()
        .expect("spawn advprune")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_json(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {err}"))
}

#[test]
fn keep_fraction_above_one_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = advprune(&["train", "--dataset", "blobs", "--keep", "1.7"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("keep_fraction"));
    assert!(!dir.path().join("runs").exists(), "nothing may be written on config errors");
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-dir");
    let o = advprune(
        &["train", "--dataset", "mnist", "--data-dir", missing.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "io");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let o = advprune(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_record_kept_ids_and_csv_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = advprune(
        &[
            "train", "--dataset", "blobs", "--strategy", "lowhigh", "--keep", "0.5", "--epochs", "4",
            "--prune-epoch", "2", "--seed", "7",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let rec: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("runs/lowhigh_k0.500_e2_s7.json")).unwrap()).unwrap();
    assert_eq!(rec["status"], "completed");
    assert_eq!(rec["config"]["train"]["seed"], 7);
    assert!(rec["experiment"]["dataset"].is_object(), "resolved config embedded");
    let sizes: Vec<u64> = rec["epochs"].as_array().unwrap().iter().map(|e| e["dataset_size"].as_u64().unwrap()).collect();
    assert_eq!(sizes[0], 2 * sizes[2]);
    assert_eq!(sizes[1], sizes[2], "prune fires before the prune epoch");

    let kept: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("kept/lowhigh_k0.500_e2_s7.json")).unwrap()).unwrap();
    assert_eq!(kept["ids"].as_array().unwrap().len() as u64, sizes[2]);

    let csv = std::fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("strategy,keep_fraction,prune_epoch,seed,clean_acc,robust_acc"));
    assert!(lines[1].starts_with("lowhigh,0.5,2,7,"));
}

#[test]
fn sweep_resumes_without_rerunning_finished_points() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["sweep", "--dataset", "blobs", "--epochs", "3", "--prune-epochs", "1", "--no-eval"];
    let run = |keeps: &str| {
        let mut args = base.to_vec();
        args.extend(["--strategies", "random,high", "--keeps", keeps]);
        advprune(&args, dir.path())
    };

    let first = run("0.5");
    assert!(first.status.success());
    assert_eq!(stdout(&first).matches("ran ").count(), 2);

    let full = run("0.5,0.75");
    assert!(full.status.success());
    let out = stdout(&full);
    assert_eq!(out.matches("reused ").count(), 2, "{out}");
    assert_eq!(out.matches("ran ").count(), 2, "{out}");

    let csv = std::fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let again = run("0.5,0.75");
    assert_eq!(stdout(&again).matches("reused ").count(), 4);
}

#[test]
fn timing_report_needs_three_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["sweep", "--dataset", "blobs", "--epochs", "2", "--prune-epochs", "1", "--no-eval"];
    let mut args = base.to_vec();
    args.extend(["--keeps", "0.5,1.0"]);
    assert!(advprune(&args, dir.path()).status.success());
    assert_eq!(advprune(&["timing-report"], dir.path()).status.code(), Some(1));

    let mut args = base.to_vec();
    args.extend(["--keeps", "0.25"]);
    assert!(advprune(&args, dir.path()).status.success());
    let o = advprune(&["timing-report"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("timing.json")).unwrap()).unwrap();
    assert_eq!(t["fit"]["points"], 3);
}

#[test]
fn toy_claims_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = advprune(&["toy", "--n", "200000", "--n-dropout", "50000", "--losses-csv", "50"], dir.path());
    let out = stdout(&o);
    assert!(o.status.success(), "{out}");
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 6);
    assert!(!out.contains("FAIL"));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("toy/report.json")).unwrap()).unwrap();
    assert_eq!(rep["schema_version"], 1);
    assert_eq!(rep["config"]["params"]["d"], 100);
    let losses = std::fs::read_to_string(dir.path().join("toy/losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 51);
}

#[test]
fn toy_rejects_bad_probabilities() {
    let dir = tempfile::tempdir().unwrap();
    let o = advprune(&["toy", "--p-robust", "1.5"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stats_compares_full_and_pruned_sets() {
    let dir = tempfile::tempdir().unwrap();
    let ids = dir.path().join("ids.json");
    std::fs::write(&ids, serde_json::to_string(&(0..200u64).step_by(2).collect::<Vec<_>>()).unwrap()).unwrap();
    let o = advprune(
        &["stats", "--dataset", "blobs", "--components", "2", "--kept", ids.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stats = dir.path().join("stats");
    let full: serde_json::Value = serde_json::from_slice(&std::fs::read(stats.join("blobs-train.json")).unwrap()).unwrap();
    let cmp: serde_json::Value =
        serde_json::from_slice(&std::fs::read(stats.join("blobs-train-ids-comparison.json")).unwrap()).unwrap();
    assert_eq!(full["n"], 200);
    assert_eq!(cmp["pruned"]["n"], 100);
    assert!(cmp["delta_rho"].as_f64().unwrap().is_finite());
    let proj = std::fs::read_to_string(stats.join("blobs-train-projection.csv")).unwrap();
    assert_eq!(proj.lines().next(), Some("id,label,pc1,pc2"));
    assert_eq!(proj.lines().count(), 201);
}

#[test]
fn stats_rejects_unknown_ids() {
    let dir = tempfile::tempdir().unwrap();
    let ids = dir.path().join("ids.json");
    std::fs::write(&ids, "[0, 1, 999999]").unwrap();
    let o = advprune(&["stats", "--dataset", "blobs", "--kept", ids.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
