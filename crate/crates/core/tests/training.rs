use seedloc::io::{load_checkpoint, save_checkpoint};
use seedloc::net::ArchConfig;
use seedloc::phantom::{generate_phantom, PhantomConfig};
use seedloc::preprocess::{PrepConfig, VoiCenter};
use seedloc::train::{train, Sample, TrainConfig};

const SHAPE: [usize; 3] = [24, 24, 16];

fn sample(seed: u64) -> Sample {
    let cfg = PhantomConfig {
        rng_seed: seed,
        shape: SHAPE,
        seed_count: 2,
        margin_mm: 1.0,
        streak_artifact_count: 1,
        ..PhantomConfig::default()
    };
    let (raw, ann) = generate_phantom(&cfg).unwrap();
    let prep = PrepConfig {
        voi_shape: SHAPE,
        ..PrepConfig::default()
    };
    Sample::from_raw(&raw, &ann, &prep, VoiCenter::VolumeCenter, &Default::default(), 100.0).unwrap()
}

fn arch() -> ArchConfig {
    ArchConfig {
        levels: 2,
        base_channels: 4,
        input_shape: SHAPE,
        ..ArchConfig::default()
    }
}

#[test]
fn overfits_a_single_volume() {
    let s = sample(3);
    let cfg = TrainConfig {
        max_rounds: 150,
        batch_size: 1,
        learning_rate: 0.01,
        map_scale: 100.0,
        weight_floor: 0.1,
        flip_augment: false,
        early_stop_patience: 150,
        ..TrainConfig::default()
    };
    let out = train(&[s.clone()], &[s], &arch(), &cfg, |_| {}).unwrap();
    let first = out.history[0].train_loss;
    let best = out.history.iter().map(|r| r.train_loss).fold(f64::INFINITY, f64::min);
    assert!(best < 0.1 * first, "first {first}, best {best}");
}

#[test]
fn same_seed_gives_identical_history_and_weights() {
    let tr = vec![sample(10), sample(11), sample(12)];
    let va = vec![sample(13)];
    let cfg = TrainConfig {
        max_rounds: 3,
        batch_size: 2,
        rng_seed: 5,
        map_scale: 100.0,
        weight_floor: 0.1,
        ..TrainConfig::default()
    };
    let a = train(&tr, &va, &arch(), &cfg, |_| {}).unwrap();
    let b = train(&tr, &va, &arch(), &cfg, |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best, b.best);
    assert_eq!(a.last, b.last);
    assert_eq!(a.history.len(), 3);
    assert!(a.last.optimizer.is_some());
    assert!(a.best.optimizer.is_none());

    let other = train(&tr, &va, &arch(), &TrainConfig { rng_seed: 6, ..cfg }, |_| {}).unwrap();
    assert_ne!(other.history, a.history);
}

#[test]
fn saved_model_predicts_like_the_trained_one() {
    let tr = vec![sample(20), sample(21)];
    let va = vec![sample(22)];
    let cfg = TrainConfig {
        max_rounds: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let out = train(&tr, &va, &arch(), &cfg, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&out.last, &dir.path().join("m")).unwrap();
    let back = load_checkpoint(&dir.path().join("m")).unwrap();
    assert_eq!(back, out.last);
    let resumed = back.adam_state().unwrap();
    assert_eq!(resumed.step, 2);
}

#[test]
fn rejects_empty_sets_and_bad_configs() {
    let s = sample(30);
    let cfg = TrainConfig::default();
    assert!(train(&[], &[s.clone()], &arch(), &cfg, |_| {}).is_err());
    assert!(train(&[s.clone()], &[], &arch(), &cfg, |_| {}).is_err());
    let bad = TrainConfig {
        learning_rate: -1.0,
        ..cfg
    };
    assert!(train(&[s.clone()], &[s], &arch(), &bad, |_| {}).is_err());
}
