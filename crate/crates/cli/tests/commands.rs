use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bitdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitdiff"))
        .args(args)
        .env_remove("BITDIFF_SEED")
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// The single-line error record and the exit code.
fn failure(out: &Output) -> (Value, i32) {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    (serde_json::from_str(err.trim_end()).unwrap(), out.status.code().unwrap())
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name).display().to_string()
}

const TINY: [&str; 26] = [
    "--set", "data.dataset=points2d",
    "--set", "model.channels=[4, 8]",
    "--set", "model.temb_dim=8",
    "--set", "model.max_groups=4",
    "--set", "schedule.timesteps=50",
    "--set", "train.batch=4",
    "--set", "train.iters=4",
    "--set", "train.log_every=2",
    "--set", "train.ckpt_every=2",
    "--set", "train.val_size=4",
    "--set", "sample.steps=3",
    "--set", "spd.lambda=0",
    "--set", "log.wall_clock=false",
];

#[test]
fn analyze_reproduces_published_totals() {
    let r = stdout_json(&bitdiff(&["analyze", "--arch", &fixture("table5.arch")]));
    let ops = r["totals"]["ops"].as_f64().unwrap();
    assert!((ops - 1.82e9).abs() <= 0.01e9, "{ops}");
    assert!((r["savings"]["ops"].as_f64().unwrap() - 52.7).abs() <= 0.1);
    assert!((r["savings"]["size"].as_f64().unwrap() - 28.0).abs() <= 0.1);
}

#[test]
fn analyze_config_compares_against_full_precision() {
    let r = stdout_json(&bitdiff(&["analyze"]));
    assert!(r["savings"]["ops"].as_f64().unwrap() > 1.0);
    assert!(r["savings"]["size"].as_f64().unwrap() > 1.0);
    assert!(r["totals"]["bops"].as_f64().unwrap() > 0.0);
    assert_eq!(r["baseline"]["bops"].as_f64().unwrap(), 0.0);
}

#[test]
fn bench_rejects_zero_repetitions() {
    let (rec, code) = failure(&bitdiff(&["bench", "--repetitions", "0"]));
    assert_eq!(code, 2);
    assert_eq!(rec["error"]["kind"], "usage");
}

#[test]
fn bench_reports_both_timings() {
    let r = stdout_json(&bitdiff(&["bench", "--c", "64", "--h", "8", "--w", "8", "--m", "16", "--repetitions", "3"]));
    let text = r.to_string();
    assert!(text.contains("speedup"), "{text}");
}

#[test]
fn unknown_and_malformed_keys_name_the_key() {
    let (rec, code) = failure(&bitdiff(&["analyze", "--set", "train.nope=1"]));
    assert_eq!((code, rec["error"]["kind"].as_str()), (2, Some("config")));
    assert_eq!(rec["error"]["key"], "train.nope");
    let (rec, code) = failure(&bitdiff(&["analyze", "--set", "train.lr=fast"]));
    assert_eq!((code, rec["error"]["key"].as_str()), (2, Some("train.lr")));
    let (rec, _) = failure(&bitdiff(&["analyze", "--set", "spd.p=3"]));
    assert_eq!(rec["error"]["key"], "spd.p");
}

#[test]
fn bad_flags_are_usage_errors() {
    let (rec, code) = failure(&bitdiff(&["train", "--bogus"]));
    assert_eq!((code, rec["error"]["kind"].as_str()), (2, Some("usage")));
    assert!(bitdiff(&["--help"]).status.success());
}

#[test]
fn config_file_and_overrides_layer() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "[model]\nchannels = [4, 8]\nquant = \"fp\"\n").unwrap();
    let f = file.display().to_string();
    let fp = stdout_json(&bitdiff(&["analyze", "--config", &f]));
    assert_eq!(fp["totals"]["bops"].as_f64().unwrap(), 0.0);
    let bin = stdout_json(&bitdiff(&["analyze", "--config", &f, "--set", "model.quant=binary"]));
    assert!(bin["totals"]["bops"].as_f64().unwrap() > 0.0);
    std::fs::write(&file, "[model]\nchanels = [4]\n").unwrap();
    let (rec, _) = failure(&bitdiff(&["analyze", "--config", &f]));
    assert_eq!(rec["error"]["key"], "model.chanels");
}

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run").display().to_string();
    let set_out = format!("out.dir={out:?}");
    let mut args = vec!["train"];
    args.extend(TINY);
    args.extend(["--set", &set_out]);
    let t = stdout_json(&bitdiff(&args));
    assert_eq!(t["iters"], 4);
    let ckpt = t["checkpoint"].as_str().unwrap().to_string();

    let samples = dir.path().join("s.bdsm").display().to_string();
    let s = stdout_json(&bitdiff(&["sample", "--checkpoint", &ckpt, "--n", "5", "--steps", "3", "--out", &samples]));
    assert_eq!(s["summary"]["shape"], serde_json::json!([2, 4, 4]));
    assert_eq!(s["summary"]["n"], 5);
    let again = dir.path().join("s2.bdsm").display().to_string();
    stdout_json(&bitdiff(&["sample", "--checkpoint", &ckpt, "--n", "5", "--steps", "3", "--out", &again]));
    assert_eq!(std::fs::read(&samples).unwrap(), std::fs::read(&again).unwrap());

    let e = stdout_json(&bitdiff(&["eval", "--samples", &samples]));
    assert_eq!(e["dataset"], "points2d");
    assert!(e["report"]["mmd"].as_f64().unwrap().is_finite());

    let (rec, code) = failure(&bitdiff(&["eval", "--samples", &samples, "--dataset", "sprites16"]));
    assert_eq!((code, rec["error"]["kind"].as_str()), (2, Some("usage")));

    let (_, code) = failure(&bitdiff(&["sample", "--checkpoint", &ckpt, "--set", "model.channels=[4, 4]"]));
    assert_eq!(code, 1);
}

#[test]
fn train_without_teacher_fails_with_key() {
    let dir = tempfile::tempdir().unwrap();
    let set_out = format!("out.dir={:?}", dir.path().display().to_string());
    let mut args = vec!["train"];
    args.extend(TINY);
    args.extend(["--set", &set_out, "--set", "spd.lambda=0.1", "--set", "spd.p=1"]);
    let (rec, code) = failure(&bitdiff(&args));
    assert_eq!((code, rec["error"]["key"].as_str()), (2, Some("spd.teacher")));
}

#[test]
fn gen_data_is_seeded_and_scores_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bdsm").display().to_string();
    let b = dir.path().join("b.bdsm").display().to_string();
    let pgm = dir.path().join("a.pgm");
    stdout_json(&bitdiff(&["gen-data", "--n", "300", "--seed", "5", "--out", &a, "--pgm", &pgm.display().to_string()]));
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5"));
    let out = Command::new(env!("CARGO_BIN_EXE_bitdiff"))
        .args(["gen-data", "--n", "300", "--out", &b])
        .env("BITDIFF_SEED", "5")
        .output()
        .unwrap();
    stdout_json(&out);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let e = stdout_json(&bitdiff(&["eval", "--samples", &a, "--seed", "11"]));
    assert!(e["report"]["mmd"].as_f64().unwrap().abs() < 0.02);
}

#[test]
fn missing_files_are_io_errors() {
    let (rec, code) = failure(&bitdiff(&["eval", "--samples", "no/such.bdsm"]));
    assert_eq!((code, rec["error"]["kind"].as_str()), (1, Some("io")));
}
