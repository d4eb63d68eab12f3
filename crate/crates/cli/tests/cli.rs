use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[data]
clips = 12
frames = 4
individuals = 4

[model]
width = 16
heads = 2
blocks = 2
clusters = 2
dropout = 0.0

[train]
epochs = 2
batch_size = 4
lr = 1e-3
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groupformer")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["gen", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let bin = std::fs::read(a.join("dataset.bin")).unwrap();
    assert_eq!(&bin[..4], b"CSTT");
    assert_eq!(bin, std::fs::read(b.join("dataset.bin")).unwrap());
    assert_eq!(
        std::fs::read(a.join("dataset.json")).unwrap(),
        std::fs::read(b.join("dataset.json")).unwrap()
    );
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["seed"], 5);
}

#[test]
fn missing_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\n[data]\nframes = 4\n");
    let o = run(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error[config]:") && err.contains("clips"), "{err}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["train", "--epochz", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[usage]:") && err.contains("--epochz"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn gradcheck_passes_on_the_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).trim_end().ends_with("PASS"), "{}", stdout(&o));
}

#[test]
fn train_then_eval_reproduces_the_reported_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["train_loss"].as_f64().unwrap().is_finite());
    }

    let last = out.join("checkpoints/last.ckpt");
    let e = run(&["eval", "--checkpoint", s(&last), "--out", s(&dir.path().join("eval"))]);
    assert!(e.status.success(), "{}", stderr(&e));
    assert_eq!(stdout(&e), stdout(&o));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("eval/eval.json")).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&m["group_acc"].as_f64().unwrap()));

    let clash = run(&["eval", "--checkpoint", s(&last), "--config", s(&cfg), "--blocks", "3", "--out", s(&dir.path().join("x"))]);
    assert_eq!(clash.status.code(), Some(1));
    let err = stderr(&clash);
    assert!(err.starts_with("error[incompatible]:") && err.contains("blocks"), "{err}");

    let missing = run(&["eval", "--checkpoint", s(&dir.path().join("nope.ckpt")), "--out", s(&dir.path().join("y"))]);
    assert!(stderr(&missing).starts_with("error[io]:"), "{}", stderr(&missing));
}

#[test]
fn training_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["train", "--config", s(&cfg), "--out", s(out), "--epochs", "1"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(
        std::fs::read(a.join("metrics.jsonl")).unwrap(),
        std::fs::read(b.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("checkpoints/last.ckpt")).unwrap(),
        std::fs::read(b.join("checkpoints/last.ckpt")).unwrap()
    );
}

#[test]
fn ablate_writes_one_row_per_arm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("abl");
    let o = run(&["ablate", "--config", s(&cfg), "--out", s(&out), "--epochs", "1", "--arms", "baseline,clusters=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "arm,group_acc,ind_acc,seed");
    assert!(rows[1].starts_with("baseline,") && rows[2].starts_with("clusters=1,"), "{csv}");
    assert_eq!(rows.len(), 3);

    let bad = run(&["ablate", "--config", s(&cfg), "--out", s(&out), "--plan", "everything"]);
    assert!(stderr(&bad).starts_with("error[config]:"), "{}", stderr(&bad));
}

fn export(dir: &Path, config: &str) -> Vec<serde_json::Value> {
    let cfg = write_config(dir, config);
    let out = dir.join("clusters");
    let o = run(&["export-clusters", "--config", s(&cfg), "--out", s(&out), "--clips", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    serde_json::from_slice(&std::fs::read(out.join("clusters.json")).unwrap()).unwrap()
}

#[test]
fn export_clusters_covers_every_individual() {
    let dir = tempfile::tempdir().unwrap();
    let entries = export(dir.path(), TINY);
    // Two blocks with one clustered (spatial) site each, 2 clips x 4 frames x 4 individuals.
    assert_eq!(entries.len(), 2 * 2 * 4 * 4);
    let mut seen = std::collections::HashSet::new();
    for e in &entries {
        assert!(e["site"].as_str().unwrap().ends_with(".spatial"));
        assert!(e["cluster"].as_u64().unwrap() < 2);
        let key = (e["site"].to_string(), e["clip"].as_u64(), e["frame"].as_u64().unwrap(), e["individual"].as_u64().unwrap());
        assert!(key.2 < 4 && key.3 < 4);
        assert!(seen.insert(key), "duplicate entry {e}");
    }

    let temporal = export(dir.path(), &TINY.replace("dropout = 0.0", "dropout = 0.0\ncluster_temporal = true"));
    assert_eq!(temporal.len(), 2 * entries.len());
    let sites: std::collections::BTreeSet<&str> = temporal.iter().map(|e| e["site"].as_str().unwrap()).collect();
    assert_eq!(
        sites.into_iter().collect::<Vec<_>>(),
        ["block0.spatial", "block0.temporal", "block1.spatial", "block1.temporal"]
    );
}
