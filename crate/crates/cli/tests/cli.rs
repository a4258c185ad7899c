use std::fs;
use std::process::{Command, Output};

fn swcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swcl")).args(args).output().expect("spawn swcl")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = swcl(&["synth", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
    assert_eq!(swcl(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(swcl(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_upstream_artifact_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path().to_str().unwrap();
    let out = swcl(&["--workdir", wd, "extract-cams"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("labeler/provenance.json"), "{msg}");
    assert!(msg.contains("swcl train-labeler"), "{msg}");
    assert!(!tmp.path().join(".swcl.lock").exists(), "lock released after failure");
}

#[test]
fn invalid_values_fail_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path().to_str().unwrap();
    let out = swcl(&["--workdir", wd, "synth", "--image-size", "30"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = swcl(&["--workdir", wd, "--threads", "0", "synth"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn held_lock_blocks_a_second_invocation() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join(".swcl.lock"), b"").unwrap();
    let out = swcl(&["--workdir", tmp.path().to_str().unwrap(), "synth", "--patients", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("locked"));
}

#[test]
fn config_file_applies_below_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"synth": {"image_size": 32, "lesion_rate": 0.0, "seed": 9}}"#).unwrap();
    let wd = tmp.path().join("wd");
    let out = swcl(&[
        "--workdir",
        wd.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "4",
        "synth",
        "--patients",
        "4",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let effective: serde_json::Value = serde_json::from_slice(&fs::read(wd.join("dataset/config.json")).unwrap()).unwrap();
    assert_eq!(effective["image_size"], 32);
    assert_eq!(effective["lesion_rate"], 0.0);
    assert_eq!(effective["seed"], 4);
    let prov: serde_json::Value = serde_json::from_slice(&fs::read(wd.join("dataset/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["stage"], "synth");
    assert_eq!(prov["seed"], 4);
    assert!(prov["files"]["manifest.jsonl"].is_string());
}

#[test]
fn verify_subset_reports_each_check() {
    let out = swcl(&["verify", "--only", "cam-algebra,auc-oracle"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS cam-algebra") && text.contains("PASS auc-oracle"), "{text}");
    assert_eq!(swcl(&["verify", "--only", "nope"]).status.code(), Some(2));
}
