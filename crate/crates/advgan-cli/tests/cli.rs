//! End-to-end checks of the command-line interface: data verification,
//! pipeline exit codes, and stage idempotence, all on tiny synthetic
//! datasets so the suite stays fast.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_advgan"))
}

/// Writes a synthetic IDX image/label pair with `n` pseudo-random instances.
fn write_idx_pair(dir: &Path, n: u32) -> (PathBuf, PathBuf) {
    let mut img = Vec::with_capacity(16 + (n as usize) * 784);
    img.extend_from_slice(&2051u32.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&28u32.to_be_bytes());
    img.extend_from_slice(&28u32.to_be_bytes());
    let mut state = 0x9e3779b97f4a7c15u64;
    for _ in 0..(n as usize) * 784 {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        img.push((state >> 56) as u8);
    }
    let mut lbl = Vec::with_capacity(8 + n as usize);
    lbl.extend_from_slice(&2049u32.to_be_bytes());
    lbl.extend_from_slice(&n.to_be_bytes());
    for i in 0..n {
        lbl.push((i % 10) as u8);
    }
    let img_path = dir.join("images.idx");
    let lbl_path = dir.join("labels.idx");
    fs::write(&img_path, img).unwrap();
    fs::write(&lbl_path, lbl).unwrap();
    (img_path, lbl_path)
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("failed to launch the binary")
}

#[test]
fn data_verify_reports_instance_count_and_hashes() {
    let tmp = TempDir::new().unwrap();
    let (img, lbl) = write_idx_pair(tmp.path(), 20);
    let out = run(bin().args(["data", "verify"])
        .arg("--images").arg(&img)
        .arg("--labels").arg(&lbl));
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("instances: 20"), "stdout: {stdout}");
    assert!(stdout.contains("sha256"), "stdout: {stdout}");
}

#[test]
fn data_verify_rejects_a_wrong_magic_number() {
    let tmp = TempDir::new().unwrap();
    let (img, lbl) = write_idx_pair(tmp.path(), 4);
    // hand the labels file where images are expected
    let out = run(bin().args(["data", "verify"])
        .arg("--images").arg(&lbl)
        .arg("--labels").arg(&img));
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("magic"), "stderr: {stderr}");
}

fn base_config(img: &Path, lbl: &Path) -> serde_json::Value {
    serde_json::json!({
        "master_seed": 7,
        "data": {
            "train_images": img,
            "train_labels": lbl,
            "fractions": {"target_train": 0.5, "distill": 0.25, "eval": 0.25}
        }
    })
}

#[test]
fn an_invalid_config_exits_with_code_1() {
    let tmp = TempDir::new().unwrap();
    let (img, lbl) = write_idx_pair(tmp.path(), 40);
    let mut cfg = base_config(&img, &lbl);
    cfg["evaluation"] = serde_json::json!({
        "eval_size": 4,
        "cells": [{"name": "bad", "arch": "C", "attack": "teleport", "access": "white"}]
    });
    let cfg_path = tmp.path().join("config.json");
    fs::write(&cfg_path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    let out = run(bin().args(["run"])
        .arg("--config").arg(&cfg_path)
        .arg("--run-dir").arg(tmp.path().join("run")));
    assert_eq!(out.status.code(), Some(1), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn the_data_stage_is_idempotent() {
    let tmp = TempDir::new().unwrap();
    let (img, lbl) = write_idx_pair(tmp.path(), 40);
    let cfg_path = tmp.path().join("config.json");
    fs::write(&cfg_path, serde_json::to_vec_pretty(&base_config(&img, &lbl)).unwrap()).unwrap();
    let run_dir = tmp.path().join("run");

    let out = run(bin().args(["run", "--stages", "data"])
        .arg("--config").arg(&cfg_path)
        .arg("--run-dir").arg(&run_dir));
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("markers").join("data.json").exists());

    let split = run_dir.join("data").join("target_train-images.idx");
    assert!(split.exists());
    let first = fs::read(&split).unwrap();
    let mtime = fs::metadata(&split).unwrap().modified().unwrap();

    let out = run(bin().args(["run", "--stages", "data"])
        .arg("--config").arg(&cfg_path)
        .arg("--run-dir").arg(&run_dir));
    assert!(out.status.success());
    assert_eq!(fs::read(&split).unwrap(), first, "rerun changed the split bytes");
    assert_eq!(
        fs::metadata(&split).unwrap().modified().unwrap(),
        mtime,
        "rerun rewrote an up-to-date artifact"
    );
}

#[test]
fn evaluation_without_attack_artifacts_exits_with_code_4() {
    let tmp = TempDir::new().unwrap();
    let (img, lbl) = write_idx_pair(tmp.path(), 60);
    let mut cfg = base_config(&img, &lbl);
    cfg["models"] = serde_json::json!({"archs": ["C"], "epochs": 1, "batch_size": 16});
    cfg["evaluation"] = serde_json::json!({
        "eval_size": 8,
        "cells": [{"name": "gen_on_c", "arch": "C", "attack": "advgan", "access": "semi_white"}]
    });
    let cfg_path = tmp.path().join("config.json");
    fs::write(&cfg_path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    let run_dir = tmp.path().join("run");

    let out = run(bin().args(["run", "--stages", "data,models"])
        .arg("--config").arg(&cfg_path)
        .arg("--run-dir").arg(&run_dir));
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let out = run(bin().args(["run", "--stages", "evaluate"])
        .arg("--config").arg(&cfg_path)
        .arg("--run-dir").arg(&run_dir));
    assert_eq!(out.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing"), "stderr: {stderr}");
}

#[test]
fn a_tiny_fgsm_pipeline_produces_a_report() {
    let tmp = TempDir::new().unwrap();
    let (img, lbl) = write_idx_pair(tmp.path(), 60);
    let mut cfg = base_config(&img, &lbl);
    cfg["models"] = serde_json::json!({"archs": ["C"], "epochs": 1, "batch_size": 16});
    cfg["evaluation"] = serde_json::json!({
        "eval_size": 8,
        "cells": [{"name": "fgsm_white_c", "arch": "C", "attack": "fgsm", "access": "white"}]
    });
    let cfg_path = tmp.path().join("config.json");
    fs::write(&cfg_path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    let run_dir = tmp.path().join("run");

    let out = run(bin().args(["run", "--deterministic"])
        .arg("--config").arg(&cfg_path)
        .arg("--run-dir").arg(&run_dir));
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report = run_dir.join("evaluate").join("report.csv");
    assert!(report.exists());
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("fgsm_white_c"), "report: {text}");

    // the report subcommand prints the same table
    let out = run(bin().args(["report"]).arg("--run-dir").arg(&run_dir));
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("fgsm_white_c"));
}
