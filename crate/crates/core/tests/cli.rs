use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mext");

fn tiny_config(dir: &Path, layers: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "model": { "layers": layers, "hidden": 16, "heads": 2, "ffn": 32 },
        "train": { "epochs": [1], "batch_size": 32 },
        "task": { "synthetic": { "size": 400 } },
    });
    let path = dir.join(format!("tiny{layers}.json"));
    std::fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    path
}

fn mext(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("MEXT_THREADS", "1").output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

/// Trains the tiny model once into `dir/out`.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = tiny_config(dir, 3);
    let out = dir.join("out");
    ok(&mext(&["train", "--config", s(&cfg), "--out", s(&out)]));
    (cfg, out)
}

#[test]
fn train_writes_checkpoint_logs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = trained(dir.path());
    for f in ["checkpoint.mext", "metrics.jsonl", "train.manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(&out.join("train.manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "train");
    let ckpt = std::fs::read(out.join("checkpoint.mext")).unwrap();
    assert_eq!(manifest["outputs"]["checkpoint.mext"], blob_hash(&ckpt));
    let line: serde_json::Value = serde_json::from_str(read(&out.join("metrics.jsonl")).lines().next().unwrap()).unwrap();
    for key in ["L_final", "L_multi", "L_kld", "conflict_rate", "per_layer_dev_acc"] {
        assert!(!line[key].is_null(), "{key}");
    }
}

#[test]
fn two_stage_regime_announces_both_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let out = dir.path().join("out");
    let o = mext(&["train", "--config", s(&cfg), "--regime", "deebert", "--out", s(&out)]);
    ok(&o);
    let err = String::from_utf8_lossy(&o.stderr);
    let stages: Vec<&str> = err.lines().filter(|l| l.starts_with("stage ")).collect();
    assert_eq!(stages, ["stage 1/2: deebert_stage1", "stage 2/2: deebert_stage2"]);
}

#[test]
fn sweep_layerwise_and_histogram_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = trained(dir.path());
    ok(&mext(&["sweep", "--config", s(&cfg), "--out", s(&out), "--thresholds", "0,0.1,0.3,0.7"]));
    let sweep = read(&out.join("sweep.csv"));
    let rows: Vec<Vec<String>> = sweep.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 4);
    let header: Vec<&str> = sweep.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap_or_else(|| panic!("{name} in {header:?}"));
    let time: f64 = rows[0][col("expected_time_pct")].parse().unwrap();
    assert_eq!(time, 100.0);
    let s0_metric: f64 = rows[0][col("metric")].parse().unwrap();

    ok(&mext(&["layerwise", "--config", s(&cfg), "--out", s(&out)]));
    let layerwise = read(&out.join("layerwise.csv"));
    let last: Vec<&str> = layerwise.lines().skip(1).collect();
    assert_eq!(last.len(), 3);
    let final_metric: f64 = last[2].split(',').nth(1).unwrap().parse().unwrap();
    assert!((final_metric - s0_metric).abs() < 1e-6);

    for (t, expect_layer) in [("0", 3), ("10", 1)] {
        ok(&mext(&["histogram", "--config", s(&cfg), "--out", s(&out), "--threshold", t]));
        let h: serde_json::Value = serde_json::from_str(&read(&out.join("histogram.json"))).unwrap();
        let counts: Vec<u64> = serde_json::from_value(h["counts"].clone()).unwrap();
        assert_eq!(counts.len(), 3);
        assert_eq!(counts[expect_layer - 1], 80, "threshold {t}: {counts:?}");
        assert_eq!(h["manifest"], "histogram.manifest.json");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        ok(&mext(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "7"]));
        ok(&mext(&["sweep", "--config", s(&cfg), "--out", s(&out), "--seed", "7"]));
        bytes.push((
            std::fs::read(out.join("checkpoint.mext")).unwrap(),
            std::fs::read(out.join("sweep.csv")).unwrap(),
        ));
    }
    assert!(bytes[0] == bytes[1]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let bad = d.join("bad.json");
    std::fs::write(&bad, r#"{"modle": {}}"#).unwrap();
    assert_eq!(mext(&["train", "--config", s(&bad), "--out", s(&d.join("x"))]).status.code(), Some(2));
    assert_eq!(mext(&["train", "--regime", "nonsense"]).status.code(), Some(2));
    assert_eq!(mext(&["train", "--regime", "deebert", "--gr", "on"]).status.code(), Some(2));
    assert_eq!(mext(&["frobnicate"]).status.code(), Some(2));

    let glue = d.join("glue.json");
    let cfg = serde_json::json!({
        "task": { "name": "sst-2", "train_path": d.join("missing.tsv"), "dev_path": d.join("missing.tsv") },
    });
    std::fs::write(&glue, serde_json::to_vec(&cfg).unwrap()).unwrap();
    assert_eq!(mext(&["train", "--config", s(&glue), "--out", s(&d.join("y"))]).status.code(), Some(3));

    let (_, out) = trained(d);
    let four = tiny_config(d, 4);
    let o = mext(&["sweep", "--config", s(&four), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn compare_covers_every_regime() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let out = dir.path().join("out");
    ok(&mext(&["compare", "--config", s(&cfg), "--out", s(&out)]));
    let csv = read(&out.join("compare.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "regime,conflict_rate,layer_1,layer_2,mean");
    let names: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["deebert", "deebert_sd", "sd_only", "romebert"]);
}

#[test]
fn gradcheck_passes() {
    let o = mext(&["gradcheck"]);
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().filter(|l| l.ends_with(" ok")).count(), 3, "{text}");
}

/// Oracle for the manifest's artifact hashes.
fn blob_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}
