use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sweep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sweep")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_line(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let last = stderr.lines().last().expect("an error line on stderr");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("not JSON ({e}): {last}"))
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let store = dir.join("store");
    let out = sweep(&[
        "synth", "--layers", "3", "--dim", "2", "--frames", "6", "--peak", "2", "--train", "12", "--val", "5", "--test",
        "5", "--out", p(&store),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    store.join("manifest.csv")
}

#[test]
fn run_writes_report_plot_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let out = dir.path().join("out");
    let run = sweep(&[
        "run", "--manifest", p(&manifest), "--layers", "1..3", "--seeds", "0,1", "--epochs", "2", "--conv", "3:2:1",
        "--dense", "", "--out", p(&out),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.contains("Best Layer"), "{stdout}");
    for f in ["runs.csv", "aggregate.json", "summary.txt", "grid.svg"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let seed_dir = out.join("synthetic").join("L2").join("seed1");
    assert!(seed_dir.join("result.csv").is_file());
    assert!(seed_dir.join("head.sslf").is_file());

    let svg = dir.path().join("again.svg");
    let plot = sweep(&["plot", "--aggregate", p(&out.join("aggregate.json")), "--out", p(&svg)]);
    assert!(plot.status.success());
    assert_eq!(std::fs::read(&svg).unwrap(), std::fs::read(out.join("grid.svg")).unwrap());
}

#[test]
fn validate_reports_missing_layer_with_machine_readable_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let ok = sweep(&["validate", "--manifest", p(&manifest), "--layers", "1..3"]);
    assert!(ok.status.success());
    let bad = sweep(&["validate", "--manifest", p(&manifest), "--layers", "1..4"]);
    let err = error_line(&bad);
    assert_eq!(err["error"], "store_invalid");
    assert!(err["message"].as_str().unwrap().contains("layer 4"));
}

#[test]
fn run_on_missing_layer_fails_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let out = dir.path().join("out");
    let run = sweep(&[
        "run", "--manifest", p(&manifest), "--layers", "4", "--conv", "3:2:1", "--dense", "", "--out", p(&out),
    ]);
    assert_eq!(error_line(&run)["error"], "store_invalid");
    assert!(!out.join("synthetic").exists());
}

#[test]
fn bad_inputs_exit_nonzero_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = sweep(&["validate", "--manifest", p(&dir.path().join("nope.csv")), "--layers", "1"]);
    let err = error_line(&missing);
    assert!(err["error"].is_string() && err["message"].is_string());

    let manifest = synth(dir.path());
    let spec = sweep(&["run", "--manifest", p(&manifest), "--layers", "3..1", "--out", p(dir.path())]);
    assert!(error_line(&spec)["message"].as_str().unwrap().contains("3..1"));

    let geometry = sweep(&["run", "--manifest", p(&manifest), "--layers", "1", "--out", p(&dir.path().join("o"))]);
    assert!(error_line(&geometry)["message"].is_string());

    let plot = sweep(&["plot", "--aggregate", p(&manifest), "--out", p(&dir.path().join("x.svg"))]);
    error_line(&plot);
}
