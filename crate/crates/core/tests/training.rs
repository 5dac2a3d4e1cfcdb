mod common;

use safecompress::attack::split_for_attack;
use safecompress::metrics::{EntropyConfig, LossVariant};
use safecompress::models::{build_target, TargetSpec};
use safecompress::numcore::LrSchedule;
use safecompress::orchestrator::{run_safecompress, train_phase, RunConfig, TrainClock};
use safecompress::rng;

use common::*;

fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

#[test]
fn sparse_training_reduces_loss_for_every_variant() {
    let (train, _) = blobs(4, 800, 10, 1.5, 5);
    for variant in [LossVariant::None, LossVariant::Re1, LossVariant::Re2] {
        let spec = TargetSpec::mlp(vec![16], vec![64, 64], 4);
        let mut model = build_target(&spec, 0.2, &mut rng::stream(2, &[1])).unwrap();
        let before = model.active_count();
        let schedule = LrSchedule::new(0.05, vec![], 0.1).unwrap();
        let mut clock = TrainClock {
            schedule: &schedule,
            batch_size: 128,
            n_train: train.len(),
            done: 0,
        };
        let loss = EntropyConfig {
            variant,
            ..EntropyConfig::default()
        };
        let losses = train_phase(&mut model, &train, 300, &loss, &mut clock, &mut rng::stream(2, &[2])).unwrap();
        let s = smoothed(&losses, 20);
        assert!(s.last().unwrap() < &(0.8 * s[0]), "{variant:?}: {} -> {}", s[0], s.last().unwrap());
        // Masked positions stay zero through SGD.
        assert_eq!(model.active_count(), before);
        assert!(model.is_consistent());
    }
}

#[test]
fn training_is_reproducible() {
    let (train, _) = blobs(3, 300, 10, 1.0, 8);
    let run = || {
        let spec = TargetSpec::mlp(vec![16], vec![32], 3);
        let mut model = build_target(&spec, 0.3, &mut rng::stream(4, &[1])).unwrap();
        let schedule = LrSchedule::new(0.1, vec![], 0.1).unwrap();
        let mut clock = TrainClock {
            schedule: &schedule,
            batch_size: 64,
            n_train: train.len(),
            done: 0,
        };
        let losses = train_phase(&mut model, &train, 50, &EntropyConfig::default(), &mut clock, &mut rng::stream(4, &[2])).unwrap();
        (losses, model)
    };
    let (l1, m1) = run();
    let (l2, m2) = run();
    assert_eq!(l1, l2);
    assert_eq!(m1, m2);
}

#[test]
fn loop_reports_are_consistent() {
    let (train, test) = blobs(3, 400, 200, 2.0, 9);
    let spec = TargetSpec::mlp(vec![16], vec![24], 3);
    let mut cfg = RunConfig::new(0.25, 6.0);
    cfg.inner_iterations = 10;
    cfg.attack.epochs = 4;
    cfg.attack.refresh_epochs = 1;
    cfg.attack.finetune_epochs = 1;
    cfg.deterministic = true;
    let mut seen = 0;
    let out = run_safecompress(&cfg, &spec, &train, &test, &mut |r, m| {
        assert_eq!(r.iteration, seen);
        assert_eq!(r.active_weights, m.active_count());
        assert!(r.wall_time.is_none());
        assert!(r.candidates.iter().any(|c| c.pair == r.selected));
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(out.reports.len(), seen);
    let target = (0.25 * out.model.maskable_count() as f64).round() as usize;
    assert_eq!(out.model.active_count(), target);
    let last = out.reports.last().unwrap();
    assert!(last.cumulative_epochs >= cfg.total_epochs);
    // Splits are rebuilt from the seed alone.
    let again = split_for_attack(&train, &test, &mut rng::stream(cfg.seed, &[safecompress::rng::domain::SPLIT])).unwrap();
    assert_eq!(again.indices, out.splits.indices);
}
