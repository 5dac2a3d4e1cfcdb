//! Membership-inference attack simulation: data splits, attack features,
//! balanced attacker training and the evaluation metrics.

mod split;

pub use split::{split_for_attack, AttackSplits, SplitIndices};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{AttackMode, Attacker, Classifier};
use crate::numcore::{adam_step, Tensor, LOG_CLAMP};
use crate::rng::StreamRng;

/// Attacker optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackTraining {
    /// Epochs for a freshly built attacker.
    pub epochs: usize,
    /// Rows per batch, split evenly between members and non-members.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-candidate fine-tune epochs.
    pub finetune_epochs: usize,
    /// Top-up epochs against each new parent.
    pub refresh_epochs: usize,
}

impl Default for AttackTraining {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 0.001,
            finetune_epochs: 5,
            refresh_epochs: 20,
        }
    }
}

impl AttackTraining {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "attack batch size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("attack learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Attack examples with membership targets (1 = member, 0 = non-member).
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSet {
    pub features: Tensor,
    pub membership: Vec<f64>,
    /// Task label of the sample each row was derived from.
    pub labels: Vec<usize>,
}

impl AttackSet {
    pub fn len(&self) -> usize {
        self.membership.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membership.is_empty()
    }

    pub fn members(&self) -> usize {
        self.membership.iter().filter(|&&m| m == 1.0).count()
    }
}

/// Attack feature rows for `data` as seen through `target`:
/// posteriors, one-hot label, and in white-box mode the loss and the
/// last-layer gradient of each sample's own loss.
pub fn attack_features(target: &impl Classifier, data: &Dataset, mode: AttackMode) -> Result<Tensor> {
    let c = target.num_classes();
    if data.num_classes != c {
        return Err(Error::Shape(format!(
            "dataset has {} classes, target {c}",
            data.num_classes
        )));
    }
    let probs = target.predict(&data.features)?;
    let extra = match mode {
        AttackMode::Blackbox => None,
        AttackMode::Whitebox => Some(target.per_sample_gradients(&data.features, &data.labels)?),
    };
    let glen = extra.as_ref().map_or(0, |(_, g)| g.row_len());
    let width = 2 * c + if extra.is_some() { 1 + glen } else { 0 };
    let mut out = Vec::with_capacity(data.len() * width);
    for (i, &y) in data.labels.iter().enumerate() {
        out.extend_from_slice(probs.row(i));
        out.extend((0..c).map(|j| if j == y { 1.0 } else { 0.0 }));
        if let Some((losses, grads)) = &extra {
            out.push(losses[i]);
            out.extend_from_slice(grads.row(i));
        }
    }
    Tensor::new(vec![data.len(), width], out)
}

fn labelled_set(target: &impl Classifier, members: &Dataset, nonmembers: &Dataset, mode: AttackMode) -> Result<AttackSet> {
    let a = attack_features(target, members, mode)?;
    let b = attack_features(target, nonmembers, mode)?;
    let width = a.row_len();
    let mut data = a.into_data();
    data.extend(b.into_data());
    let mut membership = vec![1.0; members.len()];
    membership.extend(std::iter::repeat_n(0.0, nonmembers.len()));
    let mut labels = members.labels.clone();
    labels.extend_from_slice(&nonmembers.labels);
    Ok(AttackSet {
        features: Tensor::new(vec![membership.len(), width], data)?,
        membership,
        labels,
    })
}

/// Attack-train examples from the known halves, attack-eval examples from
/// the unknown halves.
pub fn extract_examples(target: &impl Classifier, splits: &AttackSplits, mode: AttackMode) -> Result<(AttackSet, AttackSet)> {
    Ok((
        training_examples(target, splits, mode)?,
        eval_examples(target, splits, mode)?,
    ))
}

pub fn training_examples(target: &impl Classifier, splits: &AttackSplits, mode: AttackMode) -> Result<AttackSet> {
    labelled_set(target, &splits.known_train, &splits.known_test, mode)
}

pub fn eval_examples(target: &impl Classifier, splits: &AttackSplits, mode: AttackMode) -> Result<AttackSet> {
    labelled_set(target, &splits.unknown_train, &splits.unknown_test, mode)
}

/// Row composition of every batch the attacker was trained on.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchLog {
    /// `(member rows, non-member rows)` per batch.
    pub batches: Vec<(usize, usize)>,
}

/// Endless shuffled pass over one membership class.
struct ClassStream {
    rows: Vec<usize>,
    cursor: usize,
}

impl ClassStream {
    fn new(mut rows: Vec<usize>, rng: &mut StreamRng) -> Self {
        rows.shuffle(rng);
        Self { rows, cursor: 0 }
    }

    fn take(&mut self, n: usize, rng: &mut StreamRng, out: &mut Vec<usize>) {
        for _ in 0..n {
            if self.cursor == self.rows.len() {
                self.rows.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.rows[self.cursor]);
            self.cursor += 1;
        }
    }
}

/// Trains in place with binary cross-entropy and Adam. Each batch holds
/// `batch_size/2` members and as many non-members; an epoch is one pass over
/// the larger class, the smaller class reshuffling whenever it runs out.
pub fn train_attacker(
    attacker: &mut Attacker,
    set: &AttackSet,
    epochs: usize,
    cfg: &AttackTraining,
    rng: &mut StreamRng,
) -> Result<BatchLog> {
    cfg.validate()?;
    let members: Vec<usize> = (0..set.len()).filter(|&i| set.membership[i] == 1.0).collect();
    let others: Vec<usize> = (0..set.len()).filter(|&i| set.membership[i] == 0.0).collect();
    if members.is_empty() || others.is_empty() {
        return Err(Error::Attack("attacker training needs both members and non-members".into()));
    }
    let half = cfg.batch_size / 2;
    let per_epoch = members.len().max(others.len()).div_ceil(half);
    let mut m_stream = ClassStream::new(members, rng);
    let mut n_stream = ClassStream::new(others, rng);
    let mut log = BatchLog::default();
    let mut rows = Vec::with_capacity(cfg.batch_size);
    for _ in 0..epochs {
        for _ in 0..per_epoch {
            rows.clear();
            m_stream.take(half, rng, &mut rows);
            n_stream.take(half, rng, &mut rows);
            let x = set.features.select_rows(&rows);
            let targets: Vec<f64> = rows.iter().map(|&r| set.membership[r]).collect();
            let ones = targets.iter().filter(|&&t| t == 1.0).count();
            log.batches.push((ones, targets.len() - ones));

            let (mut g, out) = attacker.forward(&x)?;
            let loss = g.binary_cross_entropy(out, &targets)?;
            g.backward(loss, &mut attacker.store)?;
            adam_step(&mut attacker.store, &mut attacker.adam, cfg.learning_rate)?;
        }
    }
    Ok(log)
}

/// Copy of `parent` trained further against examples from `candidate`.
pub fn finetune_attacker(
    parent: &Attacker,
    candidate: &impl Classifier,
    splits: &AttackSplits,
    epochs: usize,
    cfg: &AttackTraining,
    rng: &mut StreamRng,
) -> Result<Attacker> {
    let mut attacker = parent.clone();
    if epochs > 0 {
        let set = training_examples(candidate, splits, parent.spec.mode)?;
        train_attacker(&mut attacker, &set, epochs, cfg, rng)?;
    }
    Ok(attacker)
}

/// Mean of member and non-member accuracy under the `p ≥ 0.5` rule.
pub fn balanced_accuracy(predictions: &[f64], membership: &[f64]) -> f64 {
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for (&p, &m) in predictions.iter().zip(membership) {
        let class = (m == 1.0) as usize;
        totals[class] += 1;
        if (p >= 0.5) == (class == 1) {
            hits[class] += 1;
        }
    }
    let rates: Vec<f64> = (0..2)
        .filter(|&c| totals[c] > 0)
        .map(|c| hits[c] as f64 / totals[c] as f64)
        .collect();
    if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    }
}

/// `Σ_members ln f + Σ_nonmembers ln(1 − f)`, clamped inside the logs.
pub fn membership_gain(predictions: &[f64], membership: &[f64]) -> f64 {
    predictions
        .iter()
        .zip(membership)
        .map(|(&p, &m)| {
            if m == 1.0 {
                p.max(LOG_CLAMP).ln()
            } else {
                (1.0 - p).max(LOG_CLAMP).ln()
            }
        })
        .sum()
}

/// Attack outcome on the evaluation slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackEval {
    pub mia_acc: f64,
    pub mia_gain: f64,
    pub member_acc: f64,
    pub nonmember_acc: f64,
    /// Balanced accuracy restricted to samples of each task class.
    pub per_class: Vec<f64>,
}

pub fn evaluate_set(attacker: &Attacker, set: &AttackSet, num_classes: usize) -> Result<AttackEval> {
    if set.is_empty() {
        return Err(Error::Attack("empty evaluation set".into()));
    }
    let preds = attacker.predict(&set.features)?;
    let side = |member: bool| {
        let (hit, n) = preds
            .iter()
            .zip(&set.membership)
            .filter(|(_, &m)| (m == 1.0) == member)
            .fold((0, 0), |(h, n), (&p, _)| (h + ((p >= 0.5) == member) as usize, n + 1));
        if n == 0 {
            0.0
        } else {
            hit as f64 / n as f64
        }
    };
    let per_class = (0..num_classes)
        .map(|c| {
            let rows: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == c).collect();
            let p: Vec<f64> = rows.iter().map(|&i| preds[i]).collect();
            let m: Vec<f64> = rows.iter().map(|&i| set.membership[i]).collect();
            balanced_accuracy(&p, &m)
        })
        .collect();
    Ok(AttackEval {
        mia_acc: balanced_accuracy(&preds, &set.membership),
        mia_gain: membership_gain(&preds, &set.membership),
        member_acc: side(true),
        nonmember_acc: side(false),
        per_class,
    })
}

/// Full evaluation of `attacker` against `target` on the unknown slices.
pub fn evaluate_attack(attacker: &Attacker, target: &impl Classifier, splits: &AttackSplits) -> Result<AttackEval> {
    let set = eval_examples(target, splits, attacker.spec.mode)?;
    evaluate_set(attacker, &set, target.num_classes())
}

/// Balanced attack accuracy on the unknown slices.
pub fn mia_accuracy(attacker: &Attacker, target: &impl Classifier, splits: &AttackSplits) -> Result<f64> {
    Ok(evaluate_attack(attacker, target, splits)?.mia_acc)
}

/// Log-likelihood gain of the attacker on the unknown slices (always ≤ 0).
pub fn mia_gain(attacker: &Attacker, target: &impl Classifier, splits: &AttackSplits) -> Result<f64> {
    Ok(evaluate_attack(attacker, target, splits)?.mia_gain)
}
