use std::collections::HashSet;

use camml_core::checkpoint::CheckpointError;
use camml_core::datastore::DatastoreIndex;
use camml_core::encoders::Tokenizer;
use camml_core::model::{CammlModel, ModelConfig, PrefixMode};
use camml_core::perceiver::PerceiverConfig;
use camml_core::synthetic::{make_synthetic_dataset, verify_construction, SyntheticDataset, SyntheticSpec};
use camml_core::training::*;
use camml_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.d = 32;
    c.encoder.projector_hidden = 32;
    c.perceiver = PerceiverConfig {
        layers: 1,
        d: 32,
        perceiver_width: 32,
        heads: 4,
        m: 8,
        ..PerceiverConfig::default()
    };
    c.generator.d = 32;
    c.generator.layers = 1;
    c.generator.max_seq = 64;
    c
}

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        train_keys: 40,
        eval_keys: 16,
        ..SyntheticSpec::default()
    }
}

fn setup() -> (CammlModel, SyntheticDataset, DatastoreIndex) {
    let model = CammlModel::new(&tiny_config()).unwrap();
    let data = make_synthetic_dataset(&tiny_spec(), &model.encoders.retrieval, &model.encoders.tokenizer).unwrap();
    let index = DatastoreIndex::build(&data.datastore, &model.encoders.retrieval).unwrap();
    (model, data, index)
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 10,
        batch_size: 4,
        lr: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn trainable_set_is_model_weights_only() {
    let model = CammlModel::new(&tiny_config()).unwrap();
    let names: Vec<String> = model.trainable_parameters().into_iter().map(|(n, _)| n).collect();
    assert!(names.iter().all(|n| !n.starts_with("enc.") && !n.starts_with("ret.")));
    assert!(names.iter().any(|n| n == "latents.H_img"));
    assert!(names.iter().any(|n| n == "latents.H_txt"));
    let expected = model.generator.params().len() + model.projector_params().len() + model.perceiver.params().len();
    assert_eq!(names.len(), expected);
    let unique: HashSet<_> = model
        .generator
        .params()
        .iter()
        .chain(&model.projector_params())
        .chain(&model.perceiver.params())
        .copied()
        .collect();
    assert_eq!(unique.len(), expected);
    let frozen: Vec<&str> = model.encoders.frozen_weights().iter().map(|(n, _)| *n).collect();
    assert!(frozen.iter().all(|n| !names.iter().any(|m| m == n)));
}

#[test]
fn shot_sampling_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!((0..100).all(|_| sample_shots(ShotsMode::Fixed(3), &mut rng) == 3));
    let mut counts = [0usize; 4];
    for _ in 0..30_000 {
        counts[sample_shots(ShotsMode::default(), &mut rng)] += 1;
    }
    assert_eq!(counts[0], 0);
    for c in &counts[1..] {
        assert!((*c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.01, "{counts:?}");
    }
    let draw = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..50).map(|_| sample_shots(ShotsMode::default(), &mut r)).collect::<Vec<_>>()
    };
    assert_eq!(draw(9), draw(9));
}

#[test]
fn dataset_is_deterministic_and_sound() {
    let (model, data, index) = setup();
    let again = make_synthetic_dataset(&tiny_spec(), &model.encoders.retrieval, &model.encoders.tokenizer).unwrap();
    assert_eq!(data.to_json().unwrap(), again.to_json().unwrap());
    assert_eq!(SyntheticDataset::from_json(&data.to_json().unwrap()).unwrap(), data);
    assert!(verify_construction(&data, &index, &model.encoders.retrieval, 3).unwrap().is_empty());
    let datastore_ids: HashSet<u64> = data.datastore.iter().map(|s| s.id).collect();
    for q in &data.eval {
        let answer = q.answer.as_deref().unwrap();
        assert!(!Tokenizer::words(&q.text).iter().any(|w| w == answer));
        assert!(!datastore_ids.contains(&q.id));
    }
}

#[test]
fn first_loss_is_uniform_and_runs_repeat_bitwise() {
    let run = || {
        let (mut model, data, index) = setup();
        let mut trainer = Trainer::new(&train_config(3), &model, &index).unwrap();
        let records = trainer.train(&mut model, &index, &data.train, 10, None).unwrap();
        records.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>()
    };
    let a = run();
    let first = f64::from_bits(a[0]);
    let ln_v = 512f64.ln();
    assert!((first - ln_v).abs() / ln_v < 0.05, "first loss {first}");
    assert_eq!(a, run());
}

#[test]
fn training_leaves_frozen_weights_alone_and_covers_all_shots() {
    let (mut model, data, index) = setup();
    let before = model.frozen_fingerprint();
    let mut trainer = Trainer::new(&train_config(4), &model, &index).unwrap();
    let mut log = Vec::new();
    let records = trainer.train(&mut model, &index, &data.train, 200, Some(&mut log)).unwrap();
    assert_eq!(model.frozen_fingerprint(), before);
    for n in 1..=3 {
        assert!(trainer.coverage.get(&n).copied().unwrap_or(0) > 0, "N={n} never trained");
    }
    let lines: Vec<StepRecord> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, records);
    let windows: Vec<f64> = records.chunks(50).map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64).collect();
    assert!(windows.iter().all(|w| w.is_finite()));
    assert!(windows.last().unwrap() < windows.first().unwrap(), "{windows:?}");
}

#[test]
fn untrained_model_scores_chance_and_recount_agrees() {
    let (model, data, index) = setup();
    let mut cache = ContextCache::new(&model, &index, 3).unwrap();
    let opts = EvalOptions {
        shots: &[1, 2, 3],
        prefix: PrefixMode::Retrieved,
        candidates: Some(&data.answers),
        max_new: 4,
    };
    let report = evaluate(&model, &index, &mut cache, &data.eval, &opts, &data.answers).unwrap();
    assert_eq!(report.rows.iter().map(|r| r.shots).collect::<Vec<_>>(), vec![1, 2, 3]);
    for row in &report.rows {
        assert_eq!(row.total, data.eval.len());
        assert!((row.accuracy - 1.0 / 16.0).abs() < 1e-12, "{row:?}");
    }
    assert_eq!(recount(&report.generations), report.rows);
    let json = serde_json::to_string(&report.generations).unwrap();
    let back: Vec<GenerationRecord> = serde_json::from_str(&json).unwrap();
    assert_eq!(recount(&back), report.rows);
}

#[test]
fn checkpoint_round_trip_restores_every_weight() {
    let (mut model, data, index) = setup();
    let mut trainer = Trainer::new(&train_config(5), &model, &index).unwrap();
    trainer.train(&mut model, &index, &data.train, 3, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save_checkpoint(&path).unwrap();
    let mut fresh = CammlModel::new(&tiny_config()).unwrap();
    assert_ne!(fresh.store.fingerprint(), model.store.fingerprint());
    fresh.load_checkpoint(&path).unwrap();
    assert_eq!(fresh.store.fingerprint(), model.store.fingerprint());

    let mut other = tiny_config();
    other.perceiver.m = 10;
    let mut wrong = CammlModel::new(&other).unwrap();
    match wrong.load_checkpoint(&path) {
        Err(Error::Checkpoint(CheckpointError::ShapeMismatch { name, .. })) => assert!(name.starts_with("latents.")),
        other => panic!("{other:?}"),
    }
    let mut other = tiny_config();
    other.perceiver.share_context_weights = false;
    let mut wrong = CammlModel::new(&other).unwrap();
    assert!(matches!(
        wrong.load_checkpoint(&path),
        Err(Error::Checkpoint(CheckpointError::UnknownParameter(_)))
    ));
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let (mut model, data, index) = setup();
    let id = model.store.id("gen.head.bias").unwrap();
    model.store.get_mut(id).value.data_mut()[7] = f64::NAN;
    let mut trainer = Trainer::new(&train_config(6), &model, &index).unwrap();
    let batch = vec![&data.train[0]];
    match trainer.train_step(&mut model, &index, &batch) {
        Err(Error::NonFiniteLoss { example_id, .. }) => assert_eq!(example_id, data.train[0].id),
        other => panic!("{other:?}"),
    }
}
