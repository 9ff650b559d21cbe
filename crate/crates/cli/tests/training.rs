mod common;

use common::{read, tiny};

use bitdiff::error::CliError;
use bitdiff::train::{checkpoint_name, train, FINAL_CHECKPOINT, METRICS_FILE};

fn teacher(root: &std::path::Path) -> String {
    let dir = root.join("teacher");
    let out = train(&tiny(&dir, &["model.quant=\"fp\""]), None).unwrap();
    format!("{:?}", out.checkpoint.display().to_string())
}

#[test]
fn repeated_runs_are_bit_identical() {
    let root = tempfile::tempdir().unwrap();
    let t = teacher(root.path());
    let extra = [format!("spd.teacher={t}"), "spd.lambda=0.5".into()];
    let extra: Vec<&str> = extra.iter().map(|s| s.as_str()).collect();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    train(&tiny(&a, &extra), None).unwrap();
    train(&tiny(&b, &extra), None).unwrap();
    let metrics = read(a.join(METRICS_FILE));
    assert_eq!(metrics, read(b.join(METRICS_FILE)));
    assert_eq!(String::from_utf8(metrics).unwrap().lines().count(), 3);
    for name in [checkpoint_name(5), checkpoint_name(10), FINAL_CHECKPOINT.to_string()] {
        assert_eq!(read(a.join(&name)), read(b.join(&name)), "{name}");
    }
}

#[test]
fn seed_changes_the_stream() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    train(&tiny(&a, &[]), None).unwrap();
    train(&tiny(&b, &["seed=1"]), None).unwrap();
    assert_ne!(read(a.join(METRICS_FILE)), read(b.join(METRICS_FILE)));
}

#[test]
fn resume_matches_the_uninterrupted_run() {
    let root = tempfile::tempdir().unwrap();
    let (full, split) = (root.path().join("full"), root.path().join("split"));
    train(&tiny(&full, &["train.iters=20"]), None).unwrap();
    train(&tiny(&split, &["train.iters=10"]), None).unwrap();
    let out = train(&tiny(&split, &["train.iters=20"]), Some(&split.join(checkpoint_name(10)))).unwrap();
    assert_eq!(out.resumed_from, Some(10));
    assert_eq!(read(full.join(METRICS_FILE)), read(split.join(METRICS_FILE)));
    assert_eq!(read(full.join(FINAL_CHECKPOINT)), read(split.join(FINAL_CHECKPOINT)));
}

#[test]
fn zero_lambda_without_connections_is_the_plain_binary_run() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let off = ["tbs.connections=0", "model.act_mode=\"xnor_dynamic\""];
    train(&tiny(&a, &[off[0], off[1], "spd.lambda=0", "spd.teacher=\"does/not/exist.bidm\""]), None).unwrap();
    train(&tiny(&b, &[off[0], off[1], "spd.lambda=0"]), None).unwrap();
    assert_eq!(read(a.join(METRICS_FILE)), read(b.join(METRICS_FILE)));
}

#[test]
fn records_have_the_documented_fields() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("run");
    train(&tiny(&dir, &["log.wall_clock=true", "spd.lambda=0"]), None).unwrap();
    let text = String::from_utf8(read(dir.join(METRICS_FILE))).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&lines[0]), ["dm_loss", "iter", "spd_loss", "total_loss", "wall_s"]);
    assert!(lines[0]["spd_loss"].is_null());
    assert_eq!(lines[1]["iter"], 10);
    assert_eq!(keys(&lines[2]), ["iter", "val_dm_loss"]);
}

#[test]
fn distillation_needs_a_teacher() {
    let root = tempfile::tempdir().unwrap();
    let err = train(&tiny(root.path(), &["spd.lambda=0.1"]), None).unwrap_err();
    assert!(matches!(&err, CliError::Config { key, .. } if key == "spd.teacher"), "{err}");
    let err = train(&tiny(root.path(), &["spd.lambda=0.1", "spd.teacher=\"missing.bidm\""]), None).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
}

#[test]
fn binary_teacher_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    let bin = train(&tiny(&root.path().join("bin"), &["spd.lambda=0"]), None).unwrap();
    let t = format!("spd.teacher={:?}", bin.checkpoint.display().to_string());
    let err = train(&tiny(&root.path().join("s"), &["spd.lambda=0.1", &t]), None).unwrap_err();
    assert!(matches!(&err, CliError::Config { key, .. } if key == "spd.teacher"), "{err}");
}

#[test]
fn full_precision_runs_ignore_distillation() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("fp");
    train(&tiny(&dir, &["model.quant=\"fp\"", "spd.lambda=0.1"]), None).unwrap();
    let text = String::from_utf8(read(dir.join(METRICS_FILE))).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(first["spd_loss"].is_null());
    assert_eq!(first["dm_loss"], first["total_loss"]);
}

#[test]
fn init_from_a_full_precision_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let t = teacher(root.path());
    let init = format!("model.init={t}");
    let dir = root.path().join("s");
    let cfg = tiny(&dir, &[&init, "spd.lambda=0", "train.iters=5"]);
    assert!(train(&cfg, None).unwrap().val_dm_loss.is_finite());
    let bad = tiny(&root.path().join("bad"), &["model.init=\"missing.bidm\""]);
    assert!(train(&bad, None).is_err());
}

#[test]
fn checkpoint_interval_must_align_with_logging() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(root.path(), &["train.ckpt_every=7"]);
    let err = train(&cfg, None).unwrap_err();
    assert!(matches!(&err, CliError::Config { key, .. } if key == "train.ckpt_every"), "{err}");
}

#[test]
fn resume_rejects_another_architecture() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    train(&tiny(&a, &[]), None).unwrap();
    let other = tiny(&root.path().join("b"), &["model.channels=[4, 4]"]);
    assert!(train(&other, Some(&a.join(checkpoint_name(5)))).is_err());
}
