use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn foleygen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foleygen"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr_line(out: &Output) -> String {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "expected one stderr line, got {err:?}");
    assert!(err.starts_with("foleygen: "), "{err:?}");
    err
}

fn json_stdout(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: String,
}

/// 12 classes with two clips each, half held out.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = root.join("corpus");
        let out = foleygen(&[
            "--json",
            "gen-dataset",
            "--out",
            corpus.to_str().unwrap(),
            "--clips-per-class",
            "2",
            "--seed",
            "3",
            "--test-fraction",
            "0.5",
        ]);
        let v = json_stdout(&out);
        assert_eq!(v["clips"], 24);
        assert_eq!(v["test"], 12);
        let manifest = corpus.join("manifest.tsv").to_str().unwrap().to_string();
        Fixture {
            _dir: dir,
            root,
            manifest,
        }
    })
}

fn path(root: &Path, name: &str) -> String {
    root.join(name).to_str().unwrap().to_string()
}

#[test]
fn unknown_clip_exits_with_status_two() {
    let f = fixture();
    let out = foleygen(&[
        "synth",
        "--ckpt",
        &path(&f.root, "absent.ckpt"),
        "--clip",
        "no_such_clip",
        "--manifest",
        &f.manifest,
        "--out",
        &path(&f.root, "x.wav"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).contains("unknown clip"));
    assert!(out.stdout.is_empty());
}

#[test]
fn infeasible_relation_scale_is_a_config_error() {
    let f = fixture();
    let out = foleygen(&[
        "train",
        "--model",
        "trn",
        "--manifest",
        &f.manifest,
        "--out",
        &path(&f.root, "q8.ckpt"),
        "--set",
        "trn.max_scale=8",
        "--set",
        "trn.sampled_frames=4",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).contains("max_scale"));
}

#[test]
fn unknown_config_key_is_reported_on_one_line() {
    let f = fixture();
    let out = foleygen(&[
        "build-bank",
        "--manifest",
        &f.manifest,
        "--out",
        &path(&f.root, "b.bin"),
        "--set",
        "fslstm.zoneout=0.2",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).contains("zoneout"));
}

#[test]
fn missing_manifest_fails_cleanly() {
    let f = fixture();
    let out = foleygen(&[
        "build-bank",
        "--manifest",
        &path(&f.root, "nope.tsv"),
        "--out",
        &path(&f.root, "b.bin"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    stderr_line(&out);
}

#[test]
fn build_bank_reports_shape_as_json() {
    let f = fixture();
    let bank = path(&f.root, "bank_json.bin");
    let v = json_stdout(&foleygen(&[
        "--json",
        "build-bank",
        "--manifest",
        &f.manifest,
        "--out",
        &bank,
    ]));
    assert_eq!(v["classes"], 12);
    assert_eq!(v["bins"], 129);
    assert_eq!(&std::fs::read(&bank).unwrap()[..8], b"FGBANK01");
}

#[test]
fn short_training_run_feeds_synth_and_eval() {
    let f = fixture();
    let ckpt = path(&f.root, "m1.ckpt");
    let metrics = path(&f.root, "m1.json");
    let v = json_stdout(&foleygen(&[
        "--json",
        "train",
        "--model",
        "fslstm",
        "--manifest",
        &f.manifest,
        "--out",
        &ckpt,
        "--metrics",
        &metrics,
        "--set",
        "train.epochs=2",
    ]));
    assert_eq!(v["model"], "fslstm");
    assert_eq!(v["epochs_run"], 2);
    assert_eq!(v["history"].as_array().unwrap().len(), 2);
    let file: Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(file, v);

    let wav = path(&f.root, "m1.wav");
    let s = json_stdout(&foleygen(&[
        "--json",
        "synth",
        "--ckpt",
        &ckpt,
        "--clip",
        "clock_00",
        "--manifest",
        &f.manifest,
        "--out",
        &wav,
    ]));
    assert_eq!(s["true_class"], "clock");
    assert_eq!(&std::fs::read(&wav).unwrap()[..4], b"RIFF");

    let wrong = foleygen(&[
        "synth",
        "--model",
        "trn",
        "--ckpt",
        &ckpt,
        "--clip",
        "clock_00",
        "--manifest",
        &f.manifest,
        "--out",
        &wav,
    ]);
    assert_eq!(wrong.status.code(), Some(1));
    stderr_line(&wrong);

    let tables = f.root.join("tables");
    let out = foleygen(&[
        "eval",
        "--mode",
        "confusion",
        "--manifest",
        &f.manifest,
        "--ckpt",
        &ckpt,
        "--format",
        "csv",
        "--out-dir",
        tables.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("accuracy"));
    let csv = std::fs::read_to_string(tables.join("confusion_counts.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);

    let e = json_stdout(&foleygen(&[
        "--json",
        "eval",
        "--mode",
        "ncc",
        "--manifest",
        &f.manifest,
        "--ckpt",
        &ckpt,
    ]));
    assert_eq!(e["clips"], 12);
    assert!(e["true_residual"]["grand_average"].as_f64().unwrap() > 0.3);
}
