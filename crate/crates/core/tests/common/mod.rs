#![allow(dead_code)]

use safecompress::attack::{evaluate_attack, split_for_attack, train_attacker, training_examples, AttackSplits, AttackTraining, BatchLog};
use safecompress::cli::{load_dataset, DatasetSource};
use safecompress::data::Dataset;
use safecompress::metrics::EntropyConfig;
use safecompress::models::{build_attacker, build_target, AttackMode, AttackerSpec, Classifier, TargetSpec};
use safecompress::numcore::LrSchedule;
use safecompress::orchestrator::{train_phase, TrainClock};
use safecompress::rng;
use safecompress::sparse::SparseModel;

pub fn blobs(classes: usize, n_train: usize, n_test: usize, std: f64, seed: u64) -> (Dataset, Dataset) {
    load_dataset(&DatasetSource::Blobs {
        classes,
        features: 16,
        n_train,
        n_test,
        cluster_std: std,
        center_spread: 1.0,
        seed,
    })
    .unwrap()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn overfit_spec() -> TargetSpec {
    TargetSpec::mlp(vec![16], vec![128, 128], 4)
}

/// Dense target trained with plain cross-entropy for `epochs` passes.
pub fn train_dense(spec: &TargetSpec, train: &Dataset, epochs: usize, seed: u64) -> SparseModel {
    let mut model = build_target(spec, 1.0, &mut rng::stream(seed, &[11])).unwrap();
    let schedule = LrSchedule::new(0.1, vec![], 0.1).unwrap();
    let mut clock = TrainClock {
        schedule: &schedule,
        batch_size: 128,
        n_train: train.len(),
        done: 0,
    };
    let iters = epochs * train.len().div_ceil(128);
    if iters > 0 {
        train_phase(&mut model, train, iters, &EntropyConfig::default(), &mut clock, &mut rng::stream(seed, &[12])).unwrap();
    }
    model
}

pub struct AttackRun {
    pub mia_acc: f64,
    pub log: BatchLog,
}

/// Fresh attacker trained with the standard protocol, scored on the
/// unknown halves.
pub fn attack(target: &impl Classifier, splits: &AttackSplits, mode: AttackMode, seed: u64) -> AttackRun {
    let spec = match mode {
        AttackMode::Blackbox => AttackerSpec::blackbox(target.num_classes()),
        AttackMode::Whitebox => AttackerSpec::whitebox(target.num_classes(), target.last_layer_len().unwrap()),
    };
    let mut attacker = build_attacker(&spec, &mut rng::stream(seed, &[13])).unwrap();
    let set = training_examples(target, splits, mode).unwrap();
    let cfg = AttackTraining::default();
    let log = train_attacker(&mut attacker, &set, cfg.epochs, &cfg, &mut rng::stream(seed, &[14])).unwrap();
    AttackRun {
        mia_acc: evaluate_attack(&attacker, target, splits).unwrap().mia_acc,
        log,
    }
}

pub fn splits(train: &Dataset, test: &Dataset, seed: u64) -> AttackSplits {
    split_for_attack(train, test, &mut rng::stream(seed, &[15])).unwrap()
}
