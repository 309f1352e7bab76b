//! End-to-end checks of the `hmdc` binary: exit codes, strict config
//! handling, artifact determinism, and the trace pipeline.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hmdc"))
}

fn assets_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../assets")
        .canonicalize()
        .expect("assets directory present")
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(
        &path,
        r#"{
  "dataset": "mnist",
  "ipc": 1,
  "iterations": 2,
  "inner_loops": 2,
  "batch_size": 16,
  "model1": {"arch": "convnet", "width": 8},
  "model2": {"arch": "tinyvit", "patch": 7, "dim": 8, "depth": 2, "heads": 2}
}"#,
    )
    .unwrap();
    path
}

#[test]
fn condense_smoke_run_writes_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let status = bin()
        .args(["condense", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .env("HMDC_DATA_DIR", assets_dir())
        .status()
        .unwrap();
    assert!(status.success());
    // N = 10 classes * ipc 1 -> images.bin = 10*1*28*28*4 bytes
    let img_len = std::fs::metadata(out.join("images.bin")).unwrap().len();
    assert_eq!(img_len, 10 * 28 * 28 * 4);
    assert_eq!(std::fs::metadata(out.join("labels.bin")).unwrap().len(), 80);
    assert!(out.join("manifest.json").is_file());
    assert!(out.join("run_manifest.json").is_file());
    // 2*2*10 image steps -> 40 metrics lines
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 40);

    // trace on the produced metrics
    let csv = tmp.path().join("trace.csv");
    let status = bin()
        .args(["trace", "--metrics"])
        .arg(out.join("metrics.jsonl"))
        .arg("--out")
        .arg(&csv)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,g1_max,g2_max,g3_max,s1,s2,s3");
    assert_eq!(text.lines().count(), 41);
}

#[test]
fn unknown_config_key_fails_naming_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"dataset": "mnist", "iterationz": 5}"#).unwrap();
    let out = bin()
        .args(["condense", "--config"])
        .arg(&cfg)
        .args(["--out", "/tmp/never"])
        .env("HMDC_DATA_DIR", assets_dir())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().next().unwrap();
    assert!(line.contains("iterationz"), "stderr should name the key: {line}");
    // machine-parseable single line
    let parsed: serde_json::Value = serde_json::from_str(line).unwrap();
    assert!(parsed.get("error").is_some());
}

#[test]
fn same_seed_gives_byte_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    for name in ["a", "b"] {
        let status = bin()
            .args(["condense", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(tmp.path().join(name))
            .args(["--seed", "7"])
            .env("HMDC_DATA_DIR", assets_dir())
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(tmp.path().join("a/images.bin")).unwrap();
    let b = std::fs::read(tmp.path().join("b/images.bin")).unwrap();
    assert_eq!(a, b, "images.bin must be byte-identical across runs");
    assert_eq!(
        std::fs::read(tmp.path().join("a/labels.bin")).unwrap(),
        std::fs::read(tmp.path().join("b/labels.bin")).unwrap()
    );
}

#[test]
fn evaluate_unsupported_model_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["evaluate", "--artifact"])
        .arg(tmp.path())
        .args(["--model", "resnet50"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported"));
}

#[test]
fn evaluate_detects_truncated_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let run = tmp.path().join("run");
    assert!(bin()
        .args(["condense", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .env("HMDC_DATA_DIR", assets_dir())
        .status()
        .unwrap()
        .success());
    let img = run.join("images.bin");
    let bytes = std::fs::read(&img).unwrap();
    std::fs::write(&img, &bytes[..bytes.len() - 8]).unwrap();
    let out = bin()
        .args(["evaluate", "--artifact"])
        .arg(&run)
        .args(["--model", "convnet", "--epochs", "1", "--seeds", "0"])
        .env("HMDC_DATA_DIR", assets_dir())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));
}

#[test]
fn trace_missing_file_fails() {
    let out = bin()
        .args(["trace", "--metrics", "/nonexistent/m.jsonl", "--out", "/tmp/x.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

/// Full evaluate path on a real (tiny) artifact.
#[test]
fn evaluate_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let run = tmp.path().join("run");
    assert!(bin()
        .args(["condense", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .env("HMDC_DATA_DIR", assets_dir())
        .status()
        .unwrap()
        .success());
    let out = bin()
        .args(["evaluate", "--artifact"])
        .arg(&run)
        .args(["--model", "tinyvit", "--epochs", "2", "--seeds", "0"])
        .env("HMDC_DATA_DIR", assets_dir())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["arch"], "tinyvit");
    assert_eq!(report["per_seed"].as_array().unwrap().len(), 1);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("tinyvit: accuracy"));
}
