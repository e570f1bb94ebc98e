//! End-to-end checks of the `augmix` binary on a tiny synthetic dataset.

use std::path::Path;
use std::process::Command;

use augmix::artifacts::REPORT_HEADER;
use augmix::dataset::write_image;
use augmix::synth::{generate, SynthConfig};

fn augmix(args: &[&str], cwd: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_augmix")).args(args).current_dir(cwd).output().expect("spawn augmix");
    assert!(out.status.success(), "augmix {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).expect("utf-8 output")
}

#[test]
fn ops_list_prints_the_registry() {
    let dir = tempfile::tempdir().unwrap();
    let out = augmix(&["ops", "--list"], dir.path());
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "index,name");
    assert_eq!(lines.len(), 13);
    assert_eq!(lines[5], "4,CenterCrop");
    assert_eq!(lines[8], "7,CenterCrop");
}

#[test]
fn train_attack_defend_and_hash_stats() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    augmix(&["synth", "--out", "data", "--train", "300", "--test", "300", "--seed", "4"], root);
    std::fs::write(
        root.join("exp.json"),
        r#"{"dataset": "data", "train_limit": 200, "rounds": 1, "epochs": 1, "topology": "ring",
            "arch": "mlp16", "eval_members": 60, "eval_nonmembers": 60, "aux_size": 120, "k_shadows": 2,
            "output_dir": "out"}"#,
    )
    .unwrap();

    augmix(&["attack", "--config", "exp.json", "--seed", "3"], root);
    let report = std::fs::read_to_string(root.join("out/report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some(REPORT_HEADER.join(",").as_str()));
    assert!(lines.next().unwrap().starts_with("data,ring,No,"));
    assert!(lines.next().unwrap().starts_with("data,ring,Yes,"));
    for f in ["rounds.csv", "duplicates.csv", "state.json", "gallery/manifest.json", "checkpoints/participant_000.ckpt"] {
        assert!(root.join("out").join(f).exists(), "missing {f}");
    }
    let rounds = std::fs::read_to_string(root.join("out/rounds.csv")).unwrap();
    assert_eq!(rounds.lines().next(), Some("round,participant,train_acc,test_acc"));
    assert_eq!(rounds.lines().count(), 1 + 4);

    // A training image is detected as a member; the answer is a distribution.
    let (train, _) = generate(&SynthConfig { train: 300, test: 0, difficulty: 1.0, seed: 4 });
    let probe = root.join("probe.png");
    write_image(&probe, &train.images[0]).unwrap();
    let out = augmix(&["defend", "--config", "exp.json", "--image", "probe.png"], root);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let probs: Vec<f64> = v["prediction"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).collect();
    assert_eq!(probs.len(), 10);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(v["decision"]["is_member_detected"].is_boolean());
    assert!(v["decision"]["phash"].is_u64());

    let out = augmix(&["hash-stats", "--config", "exp.json"], root);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["test_total"], 300);
    let dup = std::fs::read_to_string(root.join("out/duplicates.csv")).unwrap();
    assert!(dup.starts_with("multiplicity,count\n"));
    assert!(dup.contains("test_hits,test_total\n"));
}

#[test]
fn unknown_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_augmix"))
        .args(["train", "--no_such_key", "1"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}
