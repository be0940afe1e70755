//! End-to-end checks of the command-line surface: argument handling, file
//! outputs, exit codes, and idempotence.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_treepose"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("treepose-cli-{}-{}", std::process::id(), tag));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        serde_json::json!({
            "combined_types": 2,
            "single_types": 2,
            "max_passes": 2,
            "grouping_tolerance": 0.5,
            "threshold": -2.0,
            "seed": 11
        })
        .to_string(),
    )
    .unwrap();
    path
}

#[test]
fn synth_is_idempotent_for_a_seed() {
    let dir = temp_dir("synth");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let status = bin()
            .args(["synth", "--train", "3", "--test", "2", "--neg", "2", "--seed", "5", "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    for name in ["train/train_0000.pgm", "train/annotations.json", "neg/neg_0001.pgm", "parts.json"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identically seeded runs");
    }
}

#[test]
fn learn_tree_writes_edges_and_dot_and_prints_hidden_count() {
    let dir = temp_dir("learn-tree");
    let data = dir.join("data");
    assert!(bin()
        .args(["synth", "--train", "40", "--test", "1", "--neg", "1", "--seed", "3", "--out"])
        .arg(&data)
        .status()
        .unwrap()
        .success());
    let config = write_config(&dir);
    let out = bin()
        .arg("--config")
        .arg(&config)
        .args(["learn-tree"])
        .arg("--annotations")
        .arg(data.join("train/annotations.json"))
        .arg("--parts")
        .arg(data.join("parts.json"))
        .arg("--out")
        .arg(dir.join("tree.txt"))
        .arg("--dot")
        .arg(dir.join("tree.dot"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("hidden_count:"), "stdout: {stdout}");
    let edges = std::fs::read_to_string(dir.join("tree.txt")).unwrap();
    assert_eq!(edges.lines().count(), 23, "24 nodes need 23 edges");
    let dot = std::fs::read_to_string(dir.join("tree.dot")).unwrap();
    assert!(dot.starts_with("graph parts {"));
    assert!(dot.contains("--"));
}

#[test]
fn missing_input_exits_with_code_two() {
    let status = bin()
        .args([
            "learn-tree",
            "--annotations",
            "/nonexistent/annotations.json",
            "--parts",
            "/nonexistent/parts.json",
            "--out",
            "/tmp/never.txt",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_with_code_two() {
    let dir = temp_dir("badconfig");
    let config = dir.join("config.json");
    std::fs::write(&config, r#"{"wibble": true}"#).unwrap();
    let status = bin()
        .arg("--config")
        .arg(&config)
        .args(["synth", "--train", "1", "--test", "1", "--neg", "1", "--out"])
        .arg(dir.join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn infer_with_absurd_threshold_writes_empty_file_and_exits_zero() {
    let dir = temp_dir("infer-empty");
    let data = dir.join("data");
    assert!(bin()
        .args(["synth", "--train", "12", "--test", "3", "--neg", "4", "--seed", "2", "--out"])
        .arg(&data)
        .status()
        .unwrap()
        .success());
    let config = write_config(&dir);
    let train = bin()
        .arg("--config")
        .arg(&config)
        .args(["train"])
        .arg("--manifest")
        .arg(data.join("manifest.json"))
        .arg("--out")
        .arg(dir.join("model.bin"))
        .output()
        .unwrap();
    assert!(
        train.status.code() == Some(0),
        "train failed: {}",
        String::from_utf8_lossy(&train.stderr)
    );

    let status = bin()
        .arg("--config")
        .arg(&config)
        .args(["infer", "--threshold", "1e18", "--max-levels", "2"])
        .arg("--model")
        .arg(dir.join("model.bin"))
        .arg("--images")
        .arg(data.join("test"))
        .arg("--out")
        .arg(dir.join("detections.jsonl"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let contents = std::fs::read_to_string(dir.join("detections.jsonl")).unwrap();
    assert!(contents.trim().is_empty());
}

#[test]
fn eval_reports_perfect_table_for_ground_truth_predictions() {
    // Build detection records whose limb segments are the ground-truth
    // segments themselves; total PCP must be 1.0.
    let dir = temp_dir("eval-perfect");
    let data = dir.join("data");
    assert!(bin()
        .args(["synth", "--train", "2", "--test", "4", "--neg", "1", "--seed", "9", "--out"])
        .arg(&data)
        .status()
        .unwrap()
        .success());

    let annotations: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(data.join("test/annotations.json")).unwrap(),
    )
    .unwrap();
    let parts: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("parts.json")).unwrap()).unwrap();

    // Reconstruct ground-truth segments with the first-to-centroid rule.
    let singles: Vec<String> = parts["singles"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    let mut records = String::new();
    for img in annotations["images"].as_array().unwrap() {
        let kps = img["keypoints"].as_array().unwrap();
        let kp = |name: &str| -> (f64, f64) {
            let idx = singles.iter().position(|n| n == name).unwrap();
            let v = kps[idx].as_array().unwrap();
            (v[0].as_f64().unwrap(), v[1].as_f64().unwrap())
        };
        let mut limbs = Vec::new();
        for c in parts["combined"].as_array().unwrap() {
            let cons: Vec<&str> = c["constituents"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_str().unwrap())
                .collect();
            let a = kp(cons[0]);
            let rest: Vec<(f64, f64)> = cons[1..].iter().map(|n| kp(n)).collect();
            let b = (
                rest.iter().map(|p| p.0).sum::<f64>() / rest.len() as f64,
                rest.iter().map(|p| p.1).sum::<f64>() / rest.len() as f64,
            );
            limbs.push(serde_json::json!({
                "name": c["name"],
                "endpoints": [[a.0, a.1], [b.0, b.1]],
            }));
        }
        records.push_str(
            &serde_json::json!({
                "image": img["path"],
                "score": 1.0,
                "parts": [],
                "limbs": limbs,
            })
            .to_string(),
        );
        records.push('\n');
    }
    std::fs::write(dir.join("detections.jsonl"), records).unwrap();

    let out = bin()
        .args(["eval"])
        .arg("--detections")
        .arg(dir.join("detections.jsonl"))
        .arg("--annotations")
        .arg(data.join("test/annotations.json"))
        .arg("--parts")
        .arg(data.join("parts.json"))
        .arg("--out")
        .arg(dir.join("report.json"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("micro 1.0000"), "stdout: {stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["total_micro"].as_f64().unwrap(), 1.0);
}
