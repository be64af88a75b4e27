use std::path::Path;
use std::process::{Command, Output};

fn volsynth(dir: &Path, args: &[&str]) -> Output {
    let root = |s: &str| dir.join(s).to_string_lossy().into_owned();
    Command::new(env!("CARGO_BIN_EXE_volsynth"))
        .args(["--tiny", "--data", &root("data"), "--checkpoints", &root("ckpt"), "--output", &root("out")])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = volsynth(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn config_json(dir: &Path, args: &[&str]) -> serde_json::Value {
    let mut full = args.to_vec();
    full.push("print-config");
    serde_json::from_str(&ok(dir, &full)).unwrap()
}

#[test]
fn count_of_one_is_rejected_with_the_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let out = volsynth(dir.path(), &["make-data", "--count", "1"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("count must be >= 2"), "{err}");
    assert!(!dir.path().join("data").exists());
}

#[test]
fn bad_mode_probabilities_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = volsynth(dir.path(), &["train", "--stage", "mask", "--mode-probs", "0.5,0.5,0.5"]);
    assert!(!out.status.success());
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{"seed": 7, "mask": {"m": 5, "guidance": 2.0}}"#).unwrap();
    let c = cfg_path.to_str().unwrap();

    let from_file = config_json(dir.path(), &["--config", c]);
    assert_eq!(from_file["seed"], 7);
    assert_eq!(from_file["mask"]["m"], 5);
    assert_eq!(from_file["mask"]["n"], 1);
    assert_eq!(from_file["count"], 30);

    let overridden = config_json(dir.path(), &["--config", c, "--seed", "9"]);
    assert_eq!(overridden["seed"], 9);
    assert!(overridden["paths"]["data"].as_str().unwrap().ends_with("data"));
}

#[test]
fn invalid_config_file_fails_with_field_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{"mask": {"m": 4, "n": 4}}"#).unwrap();
    let out = volsynth(dir.path(), &["--config", cfg_path.to_str().unwrap(), "print-config"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n < m"));
}

#[test]
fn end_to_end_on_tiny_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(ok(d, &["make-data"]).contains("3 train and 1 val"));
    let manifest = std::fs::read(d.join("data/manifest.json")).unwrap();
    ok(d, &["make-data"]);
    assert_eq!(manifest, std::fs::read(d.join("data/manifest.json")).unwrap());

    let missing = volsynth(d, &["synthesize"]);
    assert!(!missing.status.success());

    assert!(ok(d, &["train", "--stage", "mask", "--steps", "3"]).contains("mask: steps 0 -> 3"));
    assert!(ok(d, &["train", "--stage", "mask", "--steps", "5", "--resume"]).contains("mask: steps 3 -> 5"));
    ok(d, &["train", "--stage", "image"]);
    let refiner = ok(d, &["train", "--stage", "refiner"]);
    assert_eq!(refiner.matches("refiner-").count(), 3, "{refiner}");
    assert!(d.join("ckpt/mask_loss.csv").exists());

    let synth = ok(d, &["synthesize", "--count", "2", "--seed", "11", "--refine-steps", "2"]);
    assert_eq!(synth.lines().count(), 2);
    assert!(synth.contains("seed 12"));
    let provenance: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("out/provenance.json")).unwrap()).unwrap();
    assert_eq!(provenance["refine_steps"], 2);

    let report = ok(d, &["--seed", "11", "evaluate", "--no-downstream"]);
    assert!(!report.is_empty());
    assert!(d.join("out/report.json").exists());

    let stem = d.join("out/synth_11");
    let files = ok(d, &["export-slices", "--input", stem.to_str().unwrap(), "--out-dir", d.join("png").to_str().unwrap()]);
    assert_eq!(files.lines().count(), 6);
}
