use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use multirep::corpus::{load_descriptions_json, load_fewrel_json, SplitRole};

fn multirep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multirep"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "encoder": { "layers": 1, "hidden": 16, "heads": 2, "ff": 32 },
        "iterations": 3,
        "eval_episodes": 20,
        "log_every": 1,
        "seeds": [4]
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_synthetic_writes_loadable_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("syn");
    let o = multirep(&["gen-synthetic", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let train = load_fewrel_json(out.join("train.json"), SplitRole::Train).unwrap();
    let eval = load_fewrel_json(out.join("eval.json"), SplitRole::Test).unwrap();
    let descs = load_descriptions_json(out.join("descriptions.json")).unwrap();
    assert_eq!(train.num_relations(), 7);
    assert_eq!(eval.num_relations(), 5);
    assert_eq!(descs.len(), 12);
}

#[test]
fn train_eval_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let o = multirep(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("5-way 1-shot accuracy"));

    let log = fs::read_to_string(run.join("train-seed4.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!records.is_empty());
    for r in &records {
        for key in ["step", "l_ce", "l_rcl", "l_rdcl", "total"] {
            assert!(r.get(key).is_some(), "missing {key} in {r}");
        }
    }
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let acc = metrics["accuracy_mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let ck = run.join("checkpoint-seed4.json");
    let m_out = dir.path().join("eval.json");
    let o = multirep(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--config",
        &cfg,
        "--episodes",
        "10",
        "--out",
        m_out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(m_out.exists());

    let emb = dir.path().join("emb.csv");
    let o = multirep(&[
        "export-embeddings",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--config",
        &cfg,
        "--out",
        emb.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&emb).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 121);
    // Five concatenated vectors of width 16.
    assert_eq!(lines[0].split(',').count(), 4 + 5 * 16);
}

#[test]
fn train_accepts_fewrel_files() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    assert!(multirep(&["gen-synthetic", "--out", syn.to_str().unwrap()]).status.success());
    let cfg = tiny_config(dir.path());
    let p = |f: &str| syn.join(f).to_str().unwrap().to_string();
    let o = multirep(&[
        "train",
        "--config",
        &cfg,
        "--data",
        &p("train.json"),
        "--eval-data",
        &p("eval.json"),
        "--descriptions",
        &p("descriptions.json"),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("gc.json");
    let o = multirep(&["gradcheck", "--trials", "1", "--out", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert!(!v["reports"].as_array().unwrap().is_empty());
}

#[test]
fn unknown_ablation_arm_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = multirep(&["ablate", "--arms", "full,no-such-arm", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"optimizer": {"lr": -1.0}}"#).unwrap();
    let o = multirep(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = multirep(&["train", "--iterations", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    // Six-way evaluation cannot be drawn from five held-out relations.
    let cfg = tiny_config(dir.path());
    let o = multirep(&["train", "--config", &cfg, "--n", "6", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
