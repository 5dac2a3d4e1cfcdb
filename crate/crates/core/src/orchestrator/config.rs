use serde::{Deserialize, Serialize};

use crate::attack::AttackTraining;
use crate::error::{Error, Result};
use crate::metrics::EntropyConfig;
use crate::models::{AttackMode, AttackerWidths};
use crate::numcore::LrSchedule;
use crate::sparse::StrategyPair;

/// Opt-in stop when the selected TM-score stalls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStop {
    pub min_improvement: f64,
    pub patience: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            min_improvement: 0.005,
            patience: 3,
        }
    }
}

fn all_pairs() -> Vec<StrategyPair> {
    StrategyPair::all()
}

/// Everything the compression loop needs besides data and architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Density budget Ω.
    pub omega: f64,
    #[serde(default = "all_pairs")]
    pub strategies: Vec<StrategyPair>,
    /// Optimizer iterations per inner training phase.
    #[serde(default = "defaults::inner_iterations")]
    pub inner_iterations: usize,
    /// Fine-tune iterations per candidate; one epoch when absent.
    #[serde(default)]
    pub candidate_iterations: Option<usize>,
    /// Total budget in epochs over the target training set.
    pub total_epochs: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// Epoch milestones; half and three quarters of the budget when absent.
    #[serde(default)]
    pub lr_milestones: Option<Vec<usize>>,
    #[serde(default = "defaults::lr_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub loss: EntropyConfig,
    #[serde(default = "defaults::prune_rate")]
    pub prune_rate: f64,
    #[serde(default = "defaults::final_prune_rate")]
    pub final_prune_rate: f64,
    /// Fixed magnitude threshold; derived from the first update when absent.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub attack_mode: AttackMode,
    #[serde(default)]
    pub attacker: AttackerWidths,
    #[serde(default)]
    pub attack: AttackTraining,
    /// Share of the known test half used for in-loop task accuracy.
    #[serde(default = "defaults::validation_fraction")]
    pub validation_fraction: f64,
    /// Training samples behind the gradient snapshot for gradient growth.
    #[serde(default = "defaults::probe_size")]
    pub probe_size: usize,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
    /// TM-score exponent λ.
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
    /// Sequential, fixed-order execution and no wall-clock fields.
    #[serde(default)]
    pub deterministic: bool,
}

mod defaults {
    pub fn inner_iterations() -> usize {
        4000
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn learning_rate() -> f64 {
        0.1
    }
    pub fn lr_decay() -> f64 {
        0.1
    }
    pub fn prune_rate() -> f64 {
        0.2
    }
    pub fn final_prune_rate() -> f64 {
        0.02
    }
    pub fn validation_fraction() -> f64 {
        0.2
    }
    pub fn probe_size() -> usize {
        512
    }
    pub fn lambda() -> f64 {
        1.0
    }
}

impl RunConfig {
    /// Defaults for every optional knob.
    pub fn new(omega: f64, total_epochs: f64) -> Self {
        Self {
            omega,
            strategies: all_pairs(),
            inner_iterations: defaults::inner_iterations(),
            candidate_iterations: None,
            total_epochs,
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            lr_milestones: None,
            lr_decay: defaults::lr_decay(),
            loss: EntropyConfig::default(),
            prune_rate: defaults::prune_rate(),
            final_prune_rate: defaults::final_prune_rate(),
            threshold: None,
            attack_mode: AttackMode::Blackbox,
            attacker: AttackerWidths::default(),
            attack: AttackTraining::default(),
            validation_fraction: defaults::validation_fraction(),
            probe_size: defaults::probe_size(),
            early_stop: None,
            lambda: defaults::lambda(),
            seed: 0,
            deterministic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return bad("omega must lie in (0, 1]");
        }
        if self.strategies.is_empty() {
            return bad("strategy set must not be empty");
        }
        let mut seen = self.strategies.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.strategies.len() {
            return bad("strategy set lists a pair twice");
        }
        if !(self.total_epochs >= 1.0 && self.total_epochs.is_finite()) {
            return bad("total_epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.prune_rate > 0.0 && self.prune_rate < 1.0)
            || !(self.final_prune_rate > 0.0 && self.final_prune_rate <= self.prune_rate)
        {
            return bad("prune rates must satisfy 0 < final_prune_rate <= prune_rate < 1");
        }
        if let Some(t) = self.threshold {
            if !(t >= 0.0) {
                return bad("threshold must be >= 0");
            }
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 1.0) {
            return bad("validation_fraction must lie in (0, 1]");
        }
        if self.probe_size == 0 {
            return bad("probe_size must be positive");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        self.loss.validate()?;
        self.attack.validate()?;
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        match &self.lr_milestones {
            Some(m) => LrSchedule::new(self.learning_rate, m.clone(), self.lr_decay),
            None => {
                let mut s = LrSchedule::default_for(self.learning_rate, self.total_epochs.ceil() as usize)?;
                s.decay_factor = self.lr_decay;
                LrSchedule::new(s.base_rate, s.milestones, s.decay_factor)
            }
        }
    }

    /// Candidate fine-tune iterations for a training set of `n_train` rows.
    pub fn candidate_iters(&self, n_train: usize) -> usize {
        self.candidate_iterations
            .unwrap_or_else(|| n_train.div_ceil(self.batch_size))
    }
}
