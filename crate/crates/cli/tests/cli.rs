use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reora::harness::report::RESULT_SCHEMA;

fn reora(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reora")).args(args).env("REORA_OUT", out).output().unwrap()
}

fn asset(rel: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(rel).display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_lists_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let o = reora(&["--help"], dir.path());
    assert!(o.status.success());
    for cmd in ["train", "experiment", "count", "eval", "export-task"] {
        assert!(stdout(&o).contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn count_reports_lora_and_shared_a() {
    let dir = tempfile::tempdir().unwrap();
    let arch = asset("arch/llama3-8b-shape.arch");
    let o = reora(&["count", &arch, "--scheme", "lora", "--rank", "16"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("count 28,311,552"));
    let json = dir.path().join("count.json");
    let o = reora(
        &["count", &arch, "--scheme", "reora", "--heads", "1", "--share-a", "--json", json.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(v["report"]["count"], 12_877_824);
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let arch = asset("arch/llama3-8b-shape.arch");
    assert_eq!(reora(&["count", &arch, "--rank", "0"], dir.path()).status.code(), Some(2));
    let missing = dir.path().join("nope.toml");
    assert_eq!(reora(&["train", missing.to_str().unwrap()], dir.path()).status.code(), Some(2));
    let cfg = asset("configs/train.toml");
    let o = reora(&["experiment", "sweep", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("drop-sweep"));
    assert_eq!(reora(&["train", &cfg, "--train.stpes=3"], dir.path()).status.code(), Some(2));
}

#[test]
fn zero_step_train_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = reora(&["train", &asset("configs/train.toml"), "--train.steps=0"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "metrics.csv", "backbone.ckpt", "adapters.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f} not written");
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn zero_ratio_sweep_matches_the_unpruned_model_and_fits_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let o = reora(
        &[
            "experiment",
            "drop-sweep",
            &asset("configs/drop-sweep.toml"),
            "--experiment.seeds=1",
            "--experiment.ratios=[0.0]",
            "--experiment.random_draws=1",
            "--train.steps=10",
            "--task.eval_per_domain=32",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("drop-sweep.json")).unwrap()).unwrap();
    let schema: serde_json::Value = serde_json::from_str(RESULT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&v).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    let rows = v["data"]["rows"].as_array().unwrap();
    let unpruned = rows.iter().find(|r| r["strategy"] == "unpruned").unwrap()["accuracy"].clone();
    assert!(rows.iter().all(|r| r["accuracy"] == unpruned));
    assert!(dir.path().join("drop-sweep.csv").exists());
}

#[test]
fn out_of_range_ratio_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = reora(
        &["experiment", "drop-sweep", &asset("configs/drop-sweep.toml"), "--experiment.ratios=[1.5]", "--train.steps=1"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}
