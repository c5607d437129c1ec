//! Drives the `mvip` binary end to end on a tiny synthetic set.

use std::path::Path;
use std::process::{Command, Output};

fn mvip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvip")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--override",
    "data.synth.classes=3",
    "--override",
    "model.classes=3",
    "--override",
    "data.synth.train_rotations=3",
    "--override",
    "data.synth.val_per_lay=1",
    "--override",
    "data.synth.test_per_lay=1",
    "--override",
    "data.synth.image_size=32",
    "--override",
    "model.width=16",
    "--override",
    "model.attn_heads=4",
    "--override",
    "train.epochs=2",
    "--override",
    "train.resolution=16",
];

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY.iter().copied()).collect()
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.cfg");
    std::fs::write(&p, "profile = desk\nanchor.mode = pe\nfusion = tr_ende\n").unwrap();
    let o = mvip(&["config", "--config", p.to_str().unwrap(), "--override", "train.epochs=7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("profile = desk"));
    assert!(text.contains("model.anchor = pe"));
    assert!(text.contains("train.epochs = 7"));
}

#[test]
fn bad_input_fails_cleanly() {
    let o = mvip(&["config", "--override", "train.epochz=1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown setting"));
    assert!(!mvip(&["sweep", "--preset", "nonsense"]).status.success());
    assert!(!mvip(&["eval", "--ckpt", "/nonexistent.ckpt"]).status.success());
}

#[test]
fn synth_validate_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    let o = mvip(&with_tiny(&["synth", "--out", data.to_str().unwrap()]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = mvip(&["validate", "--root", data.to_str().unwrap()]);
    assert!(v.status.success());
    let report: serde_json::Value = serde_json::from_slice(&v.stdout).unwrap();
    assert_eq!(report["ok"], true);

    let root = format!("data.root={}", data.display());
    let dir_kv = format!("output.dir={}", out.display());
    let mut args = with_tiny(&["train", "--override", &root, "--override", &dir_kv]);
    args.extend(["--override", "train.threads=1"]);
    let t = mvip(&args);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    let run: serde_json::Value = serde_json::from_slice(&t.stdout).unwrap();
    let ckpt = run["best_checkpoint"].as_str().unwrap().to_string();
    assert!(Path::new(&ckpt).exists());

    let e = mvip(&["eval", "--ckpt", &ckpt, "--split", "test"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let m: serde_json::Value = serde_json::from_slice(&e.stdout).unwrap();
    assert_eq!(m["top1"], run["test"]["top1"]);
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("views.csv");
    let o = mvip(&with_tiny(&["sweep", "--preset", "views", "--out", csv.to_str().unwrap()]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().next().unwrap().ends_with(",trend"));
}

#[test]
fn stability_reports_json() {
    let o = mvip(&with_tiny(&["stability", "--runs", "2"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["runs"].as_array().unwrap().len(), 2);
    assert!(r["max"].as_f64().unwrap() >= r["mean"].as_f64().unwrap());
}
