//! Task-side losses and scores.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::numcore::{row_entropy, Graph, NodeId};

/// Which entropy term, if any, is subtracted from the cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    #[default]
    None,
    /// Mean entropy over the whole batch.
    Re1,
    /// Mean entropy over the misclassified rows only.
    Re2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub variant: LossVariant,
}

fn default_beta() -> f64 {
    0.1
}

fn default_batch() -> usize {
    128
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            batch_size: default_batch(),
            variant: LossVariant::None,
        }
    }
}

impl EntropyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "entropy config needs beta >= 0 and batch_size >= 1, got {} / {}",
                self.beta, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Natural-log entropy of one probability row.
pub fn entropy(row: &[f64]) -> f64 {
    row_entropy(row)
}

fn regularized(g: &mut Graph, probabilities: NodeId, labels: &[usize], beta: f64, rows: &[usize]) -> Result<NodeId> {
    let ce = g.cross_entropy(probabilities, labels)?;
    if beta == 0.0 {
        return Ok(ce);
    }
    let ent = g.mean_entropy(probabilities, rows)?;
    let scaled = g.scale(ent, -beta)?;
    g.add(ce, scaled)
}

/// Cross-entropy minus `beta` times the mean batch entropy.
pub fn loss_re1(g: &mut Graph, probabilities: NodeId, labels: &[usize], config: &EntropyConfig) -> Result<NodeId> {
    let rows: Vec<usize> = (0..labels.len()).collect();
    regularized(g, probabilities, labels, config.beta, &rows)
}

/// Cross-entropy minus `beta` times the mean entropy of misclassified rows.
/// With no misclassified row the entropy term vanishes.
pub fn loss_re2(g: &mut Graph, probabilities: NodeId, labels: &[usize], config: &EntropyConfig) -> Result<NodeId> {
    let predicted = g.value(probabilities).argmax_rows();
    let missed: Vec<usize> = predicted
        .iter()
        .zip(labels)
        .enumerate()
        .filter(|(_, (p, y))| p != y)
        .map(|(i, _)| i)
        .collect();
    regularized(g, probabilities, labels, config.beta, &missed)
}

/// Loss selected by `config.variant`.
pub fn training_loss(g: &mut Graph, probabilities: NodeId, labels: &[usize], config: &EntropyConfig) -> Result<NodeId> {
    match config.variant {
        LossVariant::None => g.cross_entropy(probabilities, labels),
        LossVariant::Re1 => loss_re1(g, probabilities, labels, config),
        LossVariant::Re2 => loss_re2(g, probabilities, labels, config),
    }
}

/// Fraction of samples whose arg-max posterior equals the label.
pub fn task_accuracy(model: &impl Classifier, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Dataset("task accuracy of an empty dataset".into()));
    }
    let probs = model.predict(&dataset.features)?;
    let hits = probs
        .argmax_rows()
        .iter()
        .zip(&dataset.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// Task accuracy and attack accuracy feeding one TM-score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub task_acc: f64,
    pub mia_acc: f64,
    pub lambda: f64,
}

impl ScorePair {
    pub fn new(task_acc: f64, mia_acc: f64) -> Self {
        Self {
            task_acc,
            mia_acc,
            lambda: 1.0,
        }
    }
}

/// `task_acc^λ / mia_acc`.
pub fn tm_score(pair: ScorePair) -> Result<f64> {
    if !(pair.mia_acc > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "TM-score needs a positive attack accuracy, got {}",
            pair.mia_acc
        )));
    }
    Ok(pair.task_acc.powf(pair.lambda) / pair.mia_acc)
}
