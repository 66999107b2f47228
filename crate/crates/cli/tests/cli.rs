use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dream_cli::commands::{CHECKPOINT, MANIFEST, METRICS};
use dream_cli::{RunConfig, RunManifest};

fn dream(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dream"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, json: serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec(&json).unwrap()).unwrap();
    path
}

/// Four optimizer steps on the toy model.
fn short_config(dir: &Path) -> PathBuf {
    write(
        dir,
        "short.json",
        serde_json::json!({
            "train.epochs": 2,
            "train.batch_size": 4,
            "train.samples_per_epoch": 8,
            "train.lr_warmup_epochs": 1,
            "train.norm_samples": 64,
            "train.val_every": 0,
            "mask.warmup_epochs": 1,
        }),
    )
}

fn trained(dir: &Path) -> PathBuf {
    let run = dir.join("run");
    let out = dream(&["train", "--config", s(&short_config(dir)), "--out-dir", s(&run), "--log-every", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    run
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", serde_json::json!({"mask.sigmaa": 0.5}));
    let out = dream(&["train", "--config", s(&cfg), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mask.sigmaa"));
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dream(&[
        "sample",
        "--checkpoint",
        s(&dir.path().join("nope.bin")),
        "--prompt",
        "red circle large TL",
        "--out",
        s(&dir.path().join("x.ppm")),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(code(&dream(&["eval", "--checkpoint", "c", "--out", "o", "--mask-grid", "0,1.5"])), 2);
    assert_eq!(code(&dream(&["frobnicate"])), 2);
}

#[test]
fn gen_data_writes_cache_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("val.bin");
    let out = dream(&["gen-data", "--split", "val", "--count", "12", "--seed", "3", "--out", s(&cache)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(cache.metadata().unwrap().len() > 0);
    let m = RunManifest::load(&dir.path().join("val.bin.json")).unwrap();
    assert_eq!(m.command, "gen-data");
    assert_eq!(m.seed, 3);
    assert_eq!(m.metrics["count"], 12.0);
    assert!(!m.finished.is_empty());
}

#[test]
fn train_sample_and_sad_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path());
    for f in [CHECKPOINT, METRICS, MANIFEST, "validation.csv", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join(METRICS)).unwrap();
    assert_eq!(metrics.lines().count(), 5, "header plus one row per step");

    let manifest = RunManifest::load(&run.join(MANIFEST)).unwrap();
    assert_eq!(manifest.metrics["steps"], 4.0);
    let back = RunConfig::from_value(&serde_json::to_value(&manifest.config).unwrap()).unwrap();
    assert_eq!(back.to_flat(), manifest.config);
    assert_eq!(back.train.epochs, 2);

    let ckpt = run.join(CHECKPOINT);
    let sample = |out: &Path| {
        dream(&[
            "sample",
            "--checkpoint",
            s(&ckpt),
            "--prompt",
            "blue square small BR",
            "--steps",
            "4",
            "--seed",
            "9",
            "--out",
            s(out),
        ])
    };
    let (a, b) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
    assert_eq!(code(&sample(&a)), 0);
    assert_eq!(code(&sample(&b)), 0);
    let bytes = std::fs::read(&a).unwrap();
    assert!(bytes.starts_with(b"P6"));
    assert_eq!(bytes, std::fs::read(&b).unwrap(), "same seed, same image");

    let sad = dir.path().join("sad.ppm");
    let out = dream(&[
        "sample-sad",
        "--checkpoint",
        s(&ckpt),
        "--prompt",
        "blue square small BR",
        "--steps",
        "64",
        "--k",
        "9",
        "--budget",
        "128",
        "--out",
        s(&sad),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("sad.ppm.json")).unwrap()).unwrap();
    assert_eq!(m["t_switch"], 8);
    assert_eq!(m["k"], 9);
    assert!(m["score"].is_number());

    let out = dream(&[
        "sample-sad",
        "--checkpoint",
        s(&ckpt),
        "--prompt",
        "blue square small BR",
        "--steps",
        "16",
        "--k",
        "9",
        "--budget",
        "10",
        "--out",
        s(&sad),
    ]);
    assert_eq!(code(&out), 5);

    let out = dream(&["sample", "--checkpoint", s(&ckpt), "--prompt", "mauve blob", "--out", s(&sad)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn zero_epochs_writes_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "zero.json",
        serde_json::json!({"train.epochs": 0, "train.lr_warmup_epochs": 0, "train.norm_samples": 16}),
    );
    let run = dir.path().join("run");
    let out = dream(&["train", "--config", s(&cfg), "--out-dir", s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(run.join(METRICS)).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}
