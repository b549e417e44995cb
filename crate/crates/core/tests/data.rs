use std::fs;
use std::path::Path;

use foleygen::data::{
    generate_synthetic_corpus, load_bank, save_bank, Checkpoint, DatasetManifest, RunConfig, Split, BANK_MAGIC,
    CHECKPOINT_MAGIC, DEFAULT_CLASSES,
};
use foleygen::dsp::wav_read;
use foleygen::encoder::FEATURES_MAGIC;
use foleygen::pipeline::{bank_from_clips, prepare_dataset, Model, ModelKind};
use foleygen::video::{encode_raw_frames, load_frames, RAW_FRAMES_MAGIC};
use foleygen::{Error, Matrix};

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn corpus_is_reproducible_from_its_seed() {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    generate_synthetic_corpus(a.path(), 3, 4, 11, 0.25).unwrap();
    generate_synthetic_corpus(b.path(), 3, 4, 11, 0.25).unwrap();
    generate_synthetic_corpus(c.path(), 3, 4, 12, 0.25).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
    assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));
}

#[test]
fn corpus_manifest_is_stratified_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_corpus(dir.path(), 4, 5, 2, 0.2).unwrap();
    let loaded = DatasetManifest::load(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(loaded.entries, m.entries);
    for label in m.labels() {
        let test = m.split(Split::Test).filter(|e| e.label == label).count();
        assert_eq!(test, 1, "{label}");
    }
    let e = &m.entries[0];
    let wav = wav_read(m.resolve(&e.wav_path)).unwrap();
    assert!((wav.duration_secs() - e.duration).abs() < 1e-9);
    let frames = load_frames(m.resolve(&e.frames_path), 16, 16, e.fps).unwrap();
    assert_eq!((frames.height(), frames.width()), (16, 16));
    assert!((frames.duration_secs() - e.duration).abs() < 0.1);
    assert!(matches!(m.find("no-such-clip"), Err(Error::UnknownClip(_))));
}

#[test]
fn raw_frame_container_loads_and_resizes() {
    let dir = tempfile::tempdir().unwrap();
    let frames: Vec<Matrix> = (0..3)
        .map(|k| Matrix::from_fn(8, 6, |y, x| ((y * 6 + x + k) % 4) as f64 / 3.0))
        .collect();
    let bytes = encode_raw_frames(&frames).unwrap();
    assert_eq!(&bytes[..8], RAW_FRAMES_MAGIC);
    let path = dir.path().join("clip.bin");
    fs::write(&path, &bytes).unwrap();
    let seq = load_frames(&path, 4, 3, 10.0).unwrap();
    assert_eq!(seq.len(), 3);
    assert_eq!((seq.height(), seq.width()), (4, 3));
    fs::write(&path, b"NOTFRAMEjunk").unwrap();
    assert!(matches!(load_frames(&path, 4, 3, 10.0), Err(Error::Ingest { .. })));
}

#[test]
fn checkpoint_and_bank_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_corpus(dir.path().join("corpus"), 2, 2, 5, 0.5).unwrap();
    let cfg = RunConfig {
        classes: DEFAULT_CLASSES[..2].iter().map(|s| s.to_string()).collect(),
        ..RunConfig::default()
    };
    let clips = prepare_dataset(&manifest, &cfg).unwrap();
    let bank = bank_from_clips(&clips, &cfg).unwrap();
    let bank_path = dir.path().join("bank.bin");
    save_bank(&bank_path, &bank).unwrap();
    assert_eq!(&fs::read(&bank_path).unwrap()[..8], BANK_MAGIC);
    assert_eq!(load_bank(&bank_path).unwrap(), bank);

    for kind in [ModelKind::FsLstm, ModelKind::Trn] {
        let model = Model::new(kind, &cfg).unwrap();
        let path = dir.path().join(format!("{kind}.ckpt"));
        model.to_checkpoint().save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, model.to_checkpoint());
        assert_eq!(
            Model::from_checkpoint(&back).unwrap().to_checkpoint().encode().unwrap(),
            bytes
        );
    }
    let mut bad = fs::read(&bank_path).unwrap();
    bad[0] ^= 0xff;
    fs::write(&bank_path, bad).unwrap();
    assert!(load_bank(&bank_path).is_err());
}

#[test]
fn magics_are_distinct() {
    let all = [CHECKPOINT_MAGIC, BANK_MAGIC, RAW_FRAMES_MAGIC, FEATURES_MAGIC];
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            assert_ne!(all[i], all[j]);
        }
    }
}
