use std::fs;

use proptest::prelude::*;
use signtrans::autodiff::{Precision, Tape, Tensor};
use signtrans::corpus::{
    generate_synthetic_corpus, load_dataset, AnnotationLevel, Dataset, SyntheticConfig,
};
use signtrans::keypoints::{FeatureFrame, FeatureSequence, NormalizationMode, PartMask};
use signtrans::models::{Architecture, Ctx, Model, SourceBatch, EOS};
use signtrans::trainer::{
    clip_gradients, evaluate_loss, fit, load_checkpoint, save_checkpoint, train_epoch, AdamState,
    Example, TrainConfig, TrainError,
};

fn small_dataset() -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        n_classes: 3,
        n_signers: 3,
        samples_per_class_per_signer: 2,
        frames_per_video: 8,
        seed: 4,
        ..Default::default()
    };
    generate_synthetic_corpus(&cfg, dir.path()).unwrap();
    let data = load_dataset(
        dir.path(),
        AnnotationLevel::Gloss,
        PartMask::FULL,
        NormalizationMode::Object2D,
    )
    .unwrap();
    (dir, data)
}

fn tiny_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        batch_size: 4,
        frames_n: 5,
        augmentation_factor: 2,
        dropout_p: 0.2,
        annotation_level: AnnotationLevel::Gloss,
        hidden_dim: 8,
        embedding_dim: 8,
        max_decode_len: 6,
        ..Default::default()
    }
}

fn sequence(steps: usize, dim: usize, seed: u64) -> FeatureSequence {
    let frames = (0..steps)
        .map(|t| FeatureFrame {
            values: (0..dim)
                .map(|k| ((seed as f64 + 1.0) * 0.37 * (t * dim + k) as f64).sin())
                .collect(),
        })
        .collect();
    FeatureSequence {
        frames,
        mask: PartMask::FULL,
        mode: NormalizationMode::Object2D,
    }
}

#[test]
fn single_example_overfits() {
    let cfg = TrainConfig {
        decay_every: 1000,
        dropout_p: 0.0,
        batch_size: 1,
        ..Default::default()
    };
    let mut model = Model::new(cfg.model_config(6, 8), Precision::F32, 3).unwrap();
    let examples = vec![Example {
        features: sequence(5, 6, 0),
        target: vec![4, 5, 6, EOS],
    }];
    let mut adam = AdamState::new(&model.store);
    let losses: Vec<f64> = (0..200)
        .map(|e| train_epoch(&mut model, &examples, &cfg, &mut adam, e).unwrap())
        .collect();
    let non_decreasing = losses[..6].windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(non_decreasing <= 1, "{:?}", &losses[..6]);
    assert!(
        *losses.last().unwrap() < 0.01,
        "final loss {}",
        losses.last().unwrap()
    );
}

#[test]
fn eos_only_target_is_finite_and_differentiable() {
    for arch in [Architecture::LuongGeneral, Architecture::Transformer] {
        let cfg = TrainConfig {
            architecture: arch,
            ..tiny_config(0, 1)
        };
        let mut model = Model::new(cfg.model_config(4, 6).clone(), Precision::F64, 1).unwrap();
        let (src, seq) = (sequence(3, 4, 1), vec![vec![EOS]]);
        let tape = Tape::new();
        let loss = {
            let ctx = Ctx::eval(&tape, &model.store);
            model
                .loss(&ctx, &SourceBatch::new(&[&src]).unwrap(), &seq)
                .unwrap()
        };
        assert!(loss.item().is_finite());
        tape.backward(loss, &mut model.store).unwrap();
        let norm = model.store.grad_norm();
        assert!(norm.is_finite() && norm > 0.0);
    }
}

#[test]
fn empty_training_set_is_an_error() {
    let cfg = tiny_config(0, 1);
    let mut model = Model::new(cfg.model_config(4, 6), Precision::F32, 1).unwrap();
    let mut adam = AdamState::new(&model.store);
    assert!(matches!(
        train_epoch(&mut model, &[], &cfg, &mut adam, 0),
        Err(TrainError::EmptyDataset)
    ));

    let (_dir, mut data) = small_dataset();
    data.samples
        .retain(|s| s.split != signtrans::corpus::Split::Train);
    assert!(matches!(
        fit(&data, &cfg, None, None),
        Err(TrainError::EmptyDataset)
    ));
}

#[test]
fn evaluation_is_deterministic() {
    let (_dir, data) = small_dataset();
    let cfg = tiny_config(2, 1);
    let model = Model::new(
        cfg.model_config(data.feature_dim(), data.vocab.len()),
        Precision::F32,
        2,
    )
    .unwrap();
    let ex: Vec<Example> = data
        .samples
        .iter()
        .map(|s| signtrans::trainer::eval_example(s, cfg.frames_n))
        .collect();
    assert_eq!(
        evaluate_loss(&model, &ex, 4).unwrap(),
        evaluate_loss(&model, &ex, 4).unwrap()
    );
}

#[test]
fn report_and_best_checkpoint() {
    let (_dir, data) = small_dataset();
    let out = tempfile::tempdir().unwrap();
    let one = fit(&data, &tiny_config(5, 1), Some(out.path()), None).unwrap();
    assert_eq!(one.report.records.len(), 1);
    let lines = fs::read_to_string(out.path().join("report.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);

    let out = tempfile::tempdir().unwrap();
    let run = fit(&data, &tiny_config(5, 4), Some(out.path()), None).unwrap();
    let best = load_checkpoint(&out.path().join("best")).unwrap();
    let last_dev = run.report.records.last().unwrap().dev_loss.unwrap();
    assert!(best.meta.best_dev_loss.unwrap() <= last_dev);
    let min_dev = run
        .report
        .records
        .iter()
        .map(|r| r.dev_loss.unwrap())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(best.meta.best_dev_loss.unwrap(), min_dev);
    assert!(run.report.records.last().unwrap().dev_metrics.is_some());
}

#[test]
fn same_seed_same_losses_and_checksums() {
    let (_dir, data) = small_dataset();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = fit(&data, &tiny_config(7, 3), Some(a.path()), None).unwrap();
    let rb = fit(&data, &tiny_config(7, 3), Some(b.path()), None).unwrap();
    assert_eq!(ra.report.losses(), rb.report.losses());
    let bytes = |d: &tempfile::TempDir| fs::read(d.path().join("last/params.bin")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let meta = |d: &tempfile::TempDir| load_checkpoint(&d.path().join("last")).unwrap().meta;
    assert_eq!(meta(&a).checksum, meta(&b).checksum);

    let rc = fit(&data, &tiny_config(8, 3), None, None).unwrap();
    assert_ne!(ra.report.losses(), rc.report.losses());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (_dir, data) = small_dataset();
    let full = fit(&data, &tiny_config(9, 4), None, None).unwrap();
    let out = tempfile::tempdir().unwrap();
    let first = fit(&data, &tiny_config(9, 3), Some(out.path()), None).unwrap();
    assert_eq!(first.report.losses(), full.report.losses()[..3]);
    let ck = load_checkpoint(&out.path().join("last")).unwrap();
    assert_eq!(ck.meta.epoch, 3);
    let rest = fit(&data, &tiny_config(9, 4), Some(out.path()), Some(&ck)).unwrap();
    assert_eq!(rest.report.records.len(), 1);
    assert_eq!(rest.report.records[0].epoch, 3);
    assert_eq!(
        rest.report.records[0].train_loss,
        full.report.records[3].train_loss
    );
    assert_eq!(
        rest.report.records[0].checksum,
        full.report.records[3].checksum
    );
    let lines = fs::read_to_string(out.path().join("report.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (_dir, data) = small_dataset();
    let cfg = tiny_config(1, 2);
    let run = fit(&data, &cfg, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &cfg, &run.model, &run.vocab, &run.adam, 2, None).unwrap();
    let ck = load_checkpoint(dir.path()).unwrap();
    let model = ck.model().unwrap();
    for (a, b) in run.model.store.iter().zip(model.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.data(), b.value.data());
    }
    assert_eq!(ck.adam, run.adam);
    assert_eq!(ck.vocab, run.vocab);
}

#[test]
fn damaged_or_mismatched_checkpoints_are_rejected() {
    let (_dir, data) = small_dataset();
    let cfg = tiny_config(1, 1);
    let out = tempfile::tempdir().unwrap();
    fit(&data, &cfg, Some(out.path()), None).unwrap();
    let last = out.path().join("last");

    let other = TrainConfig {
        hidden_dim: 12,
        ..cfg.clone()
    };
    let mut wrong = Model::new(
        other.model_config(data.feature_dim(), data.vocab.len()),
        Precision::F32,
        0,
    )
    .unwrap();
    let ck = load_checkpoint(&last).unwrap();
    assert!(matches!(
        ck.restore(&mut wrong),
        Err(TrainError::IncompatibleVersion(_))
    ));
    assert!(matches!(
        fit(&data, &other, None, Some(&ck)),
        Err(TrainError::IncompatibleVersion(_))
    ));

    let meta = fs::read_to_string(last.join("meta.json")).unwrap();
    fs::write(
        last.join("meta.json"),
        meta.replace("\"format_version\": 1", "\"format_version\": 99"),
    )
    .unwrap();
    assert!(matches!(
        load_checkpoint(&last),
        Err(TrainError::IncompatibleVersion(_))
    ));
    fs::write(last.join("meta.json"), meta).unwrap();

    let params = fs::read(last.join("params.bin")).unwrap();
    fs::write(last.join("params.bin"), &params[..params.len() - 3]).unwrap();
    assert!(matches!(
        load_checkpoint(&last),
        Err(TrainError::CorruptFile(_))
    ));
    let mut flipped = params.clone();
    flipped[10] ^= 0x40;
    fs::write(last.join("params.bin"), &flipped).unwrap();
    assert!(matches!(
        load_checkpoint(&last),
        Err(TrainError::CorruptFile(_))
    ));
}

proptest! {
    #[test]
    fn clipped_norm_is_bounded(grads in prop::collection::vec(-50.0f64..50.0, 1..40), threshold in 0.1f64..10.0) {
        let mut store = signtrans::autodiff::ParamStore::new(Precision::F64);
        let id = store.add("w", Tensor::vector(&vec![0.0; grads.len()])).unwrap();
        store.get_mut(id).grad = Some(grads.clone());
        let before = store.grad_norm();
        let scale = clip_gradients(&mut store, threshold);
        prop_assert!(store.grad_norm() <= threshold + 1e-9);
        if before <= threshold {
            prop_assert_eq!(scale, 1.0);
            prop_assert_eq!(store.get(id).grad.as_deref(), Some(grads.as_slice()));
        }
    }
}
