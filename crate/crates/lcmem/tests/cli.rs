use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lcmem::report::{read_curve, MACRO};

fn lcmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcmem"))
        .args(args)
        .env_remove("LCMEM_THREADS")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TINY: &str = r#"{
  "corpus": {
    "n_datasets": 2, "identities_per_dataset": 20, "images_per_identity": 3,
    "intra_identity_noise_scale": 0.005, "inter_identity_separation": 0.04, "seed": 1
  },
  "train": {
    "stage1": {"max_epochs": 3, "patience": 3, "batch_size": 32, "learning_rate": 1e-3, "pairs_per_epoch": 128},
    "stage2": {"max_epochs": 2, "patience": 2, "batch_size": 16, "learning_rate": 1e-4, "pairs_per_epoch": 64}
  },
  "eval": {"baselines": []},
  "atlas": {"holdout_queries": 4}
}"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn corpus_gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = lcmem(&["--config", s(&cfg), "--out", s(out), "--seed", "7", "corpus", "gen"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.iter().any(|(p, _)| p.ends_with("train.lcmc")));
    assert_eq!(ta, tb);
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = lcmem(&["--config", s(&dir.path().join("nope.json")), "--out", s(dir.path()), "corpus", "gen"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"sed\": 3\n}\n").unwrap();
    let o = lcmem(&["--config", s(&cfg), "--out", s(dir.path()), "corpus", "gen"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":2:"));
}

#[test]
fn usage_error_exits_2() {
    assert_eq!(lcmem(&["train", "sideways"]).status.code(), Some(2));
}

#[test]
fn train_eval_audit_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let run = |args: &[&str]| {
        let mut full = vec!["--config", s(&cfg), "--out", s(&out), "--threads", "2"];
        full.extend_from_slice(args);
        let o = lcmem(&full);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["train", "full"]);
    for f in ["model/stage1.lcmp", "model/stage2.lcmp", "model/detector.lcmp", "model/detector.json", "train_stage1.json", "train_stage2.json", "resolved_config.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    run(&["eval", "reid"]);
    let reid: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("reid.json")).unwrap()).unwrap();
    for key in ["auc", "precision_at_recall_99", "specificity_at_sensitivity_99"] {
        assert!(reid[key].is_f64(), "{key}");
    }

    let sweep = dir.path().join("sweep.json");
    std::fs::write(&sweep, r#"[{"kind": "additive_noise", "strengths": [0.0, 0.5]}]"#).unwrap();
    run(&["eval", "copy", "--sweep", s(&sweep)]);
    let rows = read_curve(&out.join("robustness.csv")).unwrap();
    let clean = rows.iter().find(|r| r.dataset == MACRO && r.kind == "additive_noise" && r.strength == 0.0).unwrap();
    assert_eq!(clean.recall, reid["clean_recall"].as_f64().unwrap());

    run(&["atlas", "build"]);
    run(&["audit", "one-vs-all"]);
    let audit: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("audit.json")).unwrap()).unwrap();
    assert_eq!(audit["queries"].as_u64(), Some(4));

    // An atlas built by one checkpoint must not be scored by another.
    let o = lcmem(&[
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "audit",
        "one-vs-all",
        "--model",
        s(&out.join("model/stage1.lcmp")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));
}
