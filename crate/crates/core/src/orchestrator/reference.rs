//! Two-step baseline (train dense, prune once, fine-tune) and the common
//! final evaluation used to compare it with the compression loop.

use serde::{Deserialize, Serialize};

use crate::attack::{evaluate_attack, train_attacker, training_examples, AttackSplits};
use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::{task_accuracy, tm_score, EntropyConfig, LossVariant, ScorePair};
use crate::models::{build_attacker, build_target, AttackerSpec, Classifier, TargetSpec};
use crate::rng::{self, domain};
use crate::sparse::SparseModel;

use super::{train_phase, RunConfig, TrainClock};

/// Dense training for three quarters of `total_iterations`, one global
/// magnitude prune down to the budget, then plain cross-entropy fine-tuning
/// for the remainder.
pub fn run_prune_once(cfg: &RunConfig, spec: &TargetSpec, train: &Dataset, total_iterations: usize) -> Result<SparseModel> {
    cfg.validate()?;
    let mut model = build_target(spec, 1.0, &mut rng::stream(cfg.seed, &[domain::REFERENCE, 0]))?;
    let keep = ((cfg.omega * model.maskable_count() as f64).round() as usize).clamp(1, model.maskable_count());
    let schedule = cfg.schedule()?;
    let plain = EntropyConfig {
        variant: LossVariant::None,
        ..cfg.loss.clone()
    };
    let mut clock = TrainClock {
        schedule: &schedule,
        batch_size: cfg.batch_size,
        n_train: train.len(),
        done: 0,
    };
    let pretrain = total_iterations * 3 / 4;
    let mut r = rng::stream(cfg.seed, &[domain::REFERENCE, 1]);
    train_phase(&mut model, train, pretrain, &plain, &mut clock, &mut r)?;

    // Global ranking by magnitude, ties to the earlier layer and index.
    let mut ranked: Vec<(f64, usize, usize)> = (0..model.num_layers())
        .flat_map(|k| {
            model
                .weights(k)
                .data()
                .iter()
                .enumerate()
                .map(move |(i, w)| (w.abs(), k, i))
                .collect::<Vec<_>>()
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, k, i) in &ranked[keep..] {
        model.mask_mut(k).set(i, false);
        model.weights_mut(k).data_mut()[i] = 0.0;
    }
    model.omega = cfg.omega;

    let mut r = rng::stream(cfg.seed, &[domain::REFERENCE, 2]);
    train_phase(&mut model, train, total_iterations - pretrain, &plain, &mut clock, &mut r)?;
    Ok(model)
}

/// Scores of a finished model against a freshly trained attacker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub task_acc: f64,
    pub mia_acc: f64,
    pub mia_gain: f64,
    pub tm_score: f64,
}

/// Task accuracy on the whole test set and attack accuracy of a fresh
/// attacker trained for the full epoch count. `tag` separates the random
/// streams of different models evaluated under one seed.
pub fn final_evaluation(
    model: &SparseModel,
    splits: &AttackSplits,
    test: &Dataset,
    cfg: &RunConfig,
    tag: u64,
) -> Result<FinalEval> {
    let spec = AttackerSpec {
        mode: cfg.attack_mode,
        num_classes: model.num_classes(),
        gradient_len: model.last_layer_len().unwrap_or(0),
        widths: cfg.attacker.clone(),
    };
    let mut attacker = build_attacker(&spec, &mut rng::stream(cfg.seed, &[domain::FINAL_EVAL, tag, 0]))?;
    let set = training_examples(model, splits, cfg.attack_mode)?;
    let mut r = rng::stream(cfg.seed, &[domain::FINAL_EVAL, tag, 1]);
    train_attacker(&mut attacker, &set, cfg.attack.epochs, &cfg.attack, &mut r)?;
    let eval = evaluate_attack(&attacker, model, splits)?;
    let task_acc = task_accuracy(model, test)?;
    Ok(FinalEval {
        task_acc,
        mia_acc: eval.mia_acc,
        mia_gain: eval.mia_gain,
        tm_score: tm_score(ScorePair {
            task_acc,
            mia_acc: eval.mia_acc,
            lambda: cfg.lambda,
        })?,
    })
}
