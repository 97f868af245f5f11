//! The binary's contract: exit codes, fail-fast validation, file outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_oral3d"))
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Smoke config with one top-level key removed.
fn config_without(dir: &Path, key: &str) -> PathBuf {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(smoke_config()).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove(key);
    let p = dir.join(format!("no_{key}.json"));
    fs::write(&p, v.to_string()).unwrap();
    p
}

#[test]
fn help_version_and_usage_errors() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["gradcheck", "--graphs", "many"])), 1);
}

#[test]
fn missing_config_key_fails_before_writing_anything() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    for key in ["train", "seed", "metrics"] {
        let cfg = config_without(dir.path(), key);
        let o = run(&["run-all", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 1, "{}", stderr(&o));
        assert!(stderr(&o).contains(&format!("`{key}`")), "{}", stderr(&o));
        assert!(!out.exists());
    }
    // Only the generated configs remain.
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 3, "{names:?}");
}

#[test]
fn commands_that_need_inputs_say_so() {
    let o = run(&["phantom", "--out", "/tmp/unused"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--config"));
    let cfg = smoke_config();
    let o = run(&["phantom", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--out"));
    assert_eq!(code(&run(&["split", "a", "b", "c", "--out", "/tmp/unused"])), 1);
}

#[test]
fn split_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let files: Vec<String> = (0..100).map(|i| format!("v{i:03}.json")).collect();
    let mut args = vec!["split", "--seed", "4", "--out", dir.path().to_str().unwrap()];
    args.extend(files.iter().map(String::as_str));
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("train 60 / val 20 / test 20"));
    let read = |n: &str| -> Vec<String> { serde_json::from_slice(&fs::read(dir.path().join(n)).unwrap()).unwrap() };
    let first = (read("train.json"), read("val.json"), read("test.json"));
    assert_eq!(code(&run(&args)), 0);
    assert_eq!(first, (read("train.json"), read("val.json"), read("test.json")));
}

#[test]
fn phantom_synth_roundtrip_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    let ph = d.join("ph");
    let o = run(&["phantom", "--config", cfg, "--n", "2", "--out", ph.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let vol = ph.join("phantom_0000.json");
    assert!(vol.is_file() && ph.join("phantom_0001.raw").is_file() && ph.join("phantom_0000_curve.json").is_file());

    let pair = d.join("pair");
    let o = run(&["synth", vol.to_str().unwrap(), "--config", cfg, "--out", pair.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(pair.join("px.pgm").is_file() && pair.join("roi.raw").is_file());

    let o = run(&["roundtrip", vol.to_str().unwrap(), "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["psnr_db"].as_f64().unwrap() >= 30.0, "{report}");

    let roi = pair.join("roi.json");
    let o = run(&["eval", roi.to_str().unwrap(), vol.to_str().unwrap(), "--tau", "-0.8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("\"dice\"") && text.contains("overall_pct"), "{text}");
}

#[test]
fn gradcheck_passes_and_reports() {
    let o = run(&["gradcheck", "--graphs", "13", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("max relative error"));
}
