use std::fs;
use std::path::{Path, PathBuf};

use dynlab_core::model::{ModelConfig, WriteKind};
use dynlab_core::store::{
    self, corpus_digest, AnalysisSettings, RunHeader, RunReader, RunWriter, StoreError,
};
use dynlab_core::trainer::{Checkpoint, TrainConfig, Trainer};
use proptest::prelude::*;

fn model() -> ModelConfig {
    ModelConfig::new(2, 8, 2, 16, 6).unwrap()
}

fn train_cfg(total: u64) -> TrainConfig {
    TrainConfig {
        total_steps: total,
        batch_size: 3,
        base_lr: 3e-3,
        warmup_steps: 2,
        min_lr_fraction: 0.1,
        seed: 11,
        linear_ckpt_interval: 4,
        log_ckpt_cap: 4,
    }
}

fn corpus() -> Vec<u32> {
    (0..400u32).map(|i| (i * 7 + i / 5) % 16).collect()
}

fn header(m: &ModelConfig, t: &TrainConfig, c: &[u32]) -> RunHeader {
    RunHeader {
        model_id: "toy".into(),
        model_config: m.clone(),
        train_config: t.clone(),
        schedule: t.schedule().unwrap(),
        corpus_digest: corpus_digest(c),
        corpus_tokens: c.len() as u64,
        analysis: AnalysisSettings::default(),
    }
}

fn write_run(dir: &Path, total: u64) {
    let (m, t, c) = (model(), train_cfg(total), corpus());
    let mut trainer = Trainer::new(&m, &t, &c).unwrap();
    let mut writer = RunWriter::create(dir, header(&m, &t, &c), &trainer.eval_batch()).unwrap();
    trainer
        .run(|rec| writer.write_record(&rec).map_err(Into::into))
        .unwrap();
    writer.finalize().unwrap();
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

#[test]
fn save_load_save_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    write_run(&run, 8);
    let reader = RunReader::open(&run).unwrap();
    assert!(reader.manifest().finalized);
    assert_eq!(reader.manifest().schedule, vec![0, 1, 2, 4, 8]);

    let copy = tmp.path().join("copy");
    for entry in &reader.manifest().checkpoints {
        let ckpt = reader.load_checkpoint(entry.step).unwrap();
        let again = store::save_checkpoint(&copy, &ckpt).unwrap();
        assert_eq!(&again, entry);
        let reloaded = store::load_checkpoint(&run, entry.step).unwrap();
        assert_eq!(reloaded, ckpt);
    }
    for entry in &reader.manifest().activations {
        let m = reader.load_activations(entry.step, entry.layer, entry.kind).unwrap();
        assert_eq!(m.shape(), (3 * 6, 8));
        let again = store::save_activations(&copy, entry.step, entry.layer, entry.kind, &m).unwrap();
        assert_eq!(&again, entry);
    }
}

#[test]
fn activations_match_a_fresh_forward_pass() {
    let tmp = tempfile::tempdir().unwrap();
    write_run(tmp.path(), 4);
    let reader = RunReader::open(tmp.path()).unwrap();
    let batch = reader.eval_batch().unwrap();
    let ckpt = reader.load_checkpoint(4).unwrap();
    let (_, trace, _) = dynlab_core::model::forward_batch(&ckpt.params, &batch).unwrap();
    for l in 0..2 {
        for k in WriteKind::ALL {
            let stored = reader.load_activations(4, l, k).unwrap();
            assert_eq!(&stored, trace.write(l, k));
        }
    }
}

#[test]
fn missing_entries_are_not_found() {
    let tmp = tempfile::tempdir().unwrap();
    write_run(tmp.path(), 5);
    let reader = RunReader::open(tmp.path()).unwrap();
    assert!(matches!(reader.load_checkpoint(3), Err(StoreError::NotFound(_))));
    assert!(matches!(
        reader.load_activations(0, 5, WriteKind::Att),
        Err(StoreError::NotFound(_))
    ));
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(RunReader::open(empty.path()), Err(StoreError::NotFound(_))));
}

#[test]
fn second_writer_is_locked_out() {
    let tmp = tempfile::tempdir().unwrap();
    let (m, t, c) = (model(), train_cfg(5), corpus());
    let batch = vec![vec![1u32; 6]];
    let first = RunWriter::create(tmp.path(), header(&m, &t, &c), &batch).unwrap();
    let second = RunWriter::create(tmp.path(), header(&m, &t, &c), &batch);
    assert!(matches!(second, Err(StoreError::Locked(_))));
    let manifest = first.finalize().unwrap();
    assert!(manifest.finalized);
    // Lock released, but the directory now holds a run.
    assert!(RunWriter::create(tmp.path(), header(&m, &t, &c), &batch).is_err());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (m, t, c) = (model(), train_cfg(8), corpus());
    let tmp = tempfile::tempdir().unwrap();
    write_run(tmp.path(), 8);
    let reader = RunReader::open(tmp.path()).unwrap();

    let at4 = reader.load_checkpoint(4).unwrap();
    let mut resumed: Vec<Checkpoint> = Vec::new();
    let mut trainer = Trainer::resume(&m, &t, &c, at4).unwrap();
    trainer
        .run(|rec| {
            resumed.push(rec.checkpoint);
            Ok(())
        })
        .unwrap();
    assert_eq!(resumed.len(), 1);
    let straight = reader.load_checkpoint(8).unwrap();
    // Bitwise equality: the whole pipeline is deterministic.
    assert_eq!(resumed[0], straight);
}

fn flip(path: &Path, offset: usize, mask: u8) {
    let mut bytes = fs::read(path).unwrap();
    let i = offset % bytes.len();
    bytes[i] ^= mask;
    fs::write(path, bytes).unwrap();
}

fn verify_run(dir: &Path) -> Result<(), StoreError> {
    let reader = RunReader::open(dir)?;
    reader.verify()
}

#[test]
fn corrupted_magic_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    write_run(tmp.path(), 5);
    let path = tmp.path().join("checkpoints/step_00000002/params.dlt");
    flip(&path, 0, 0x01);
    let err = store::load_checkpoint(tmp.path(), 2).unwrap_err();
    assert!(matches!(err, StoreError::Integrity { .. }), "{err}");
    let bytes = fs::read(&path).unwrap();
    assert!(matches!(
        store::decode_tensors(&bytes),
        Err(StoreError::Format(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn any_single_byte_flip_is_detected(
        file in any::<prop::sample::Index>(),
        offset in any::<usize>(),
        mask in 1u8..=255,
    ) {
        let tmp = tempfile::tempdir().unwrap();
        write_run(tmp.path(), 5);
        prop_assert!(verify_run(tmp.path()).is_ok());
        let files = files_under(tmp.path());
        let target = file.get(&files);
        flip(target, offset, mask);
        prop_assert!(verify_run(tmp.path()).is_err(), "undetected flip in {}", target.display());
    }
}
