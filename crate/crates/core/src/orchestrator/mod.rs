//! The compress → attack → test → select loop.

mod config;
mod reference;

pub use config::{EarlyStop, RunConfig};
pub use reference::{final_evaluation, run_prune_once, FinalEval};

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{
    evaluate_attack, finetune_attacker, split_for_attack, train_attacker, training_examples, AttackSplits,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{task_accuracy, tm_score, training_loss, EntropyConfig, ScorePair};
use crate::models::{build_attacker, build_target, Attacker, AttackerSpec, Classifier, TargetSpec};
use crate::numcore::{sgd_step, LrSchedule, Tensor};
use crate::rng::{self, domain, StreamRng};
use crate::sparse::{quantile_threshold, sparse_update, SparseModel, StrategyPair};

/// Scores of one candidate topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub pair: StrategyPair,
    pub task_acc: f64,
    pub mia_acc: f64,
    pub tm_score: f64,
    pub mia_gain: f64,
}

/// A candidate that could not be scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscardNote {
    pub pair: StrategyPair,
    pub reason: String,
}

/// Record of one outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub candidates: Vec<CandidateReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub discarded: Vec<DiscardNote>,
    pub selected: StrategyPair,
    pub selected_tm_score: f64,
    pub prune_rate: f64,
    pub threshold: f64,
    pub active_weights: usize,
    pub sparsity: f64,
    pub optimizer_iterations: usize,
    pub cumulative_epochs: f64,
    /// Seconds since the run started; absent in deterministic mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

/// Result of a full compression run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: SparseModel,
    pub reports: Vec<IterationReport>,
    pub splits: AttackSplits,
    pub validation: Dataset,
    /// Attacker as last refreshed against the selected lineage.
    pub attacker: Attacker,
    pub optimizer_iterations: usize,
    pub stopped_early: bool,
}

/// Index of the best-scoring candidate: highest TM-score, then lower attack
/// accuracy, then the fixed strategy-pair order.
pub fn select_best(candidates: &[CandidateReport]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate to select from".into()));
    }
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let b = &candidates[best];
        let better = c.tm_score > b.tm_score
            || (c.tm_score == b.tm_score
                && (c.mia_acc < b.mia_acc || (c.mia_acc == b.mia_acc && c.pair < b.pair)));
        if better {
            best = i;
        }
    }
    Ok(best)
}

/// Worker count for candidate fan-out; `SFCMP_THREADS=0` or deterministic
/// mode means sequential.
pub fn worker_count(deterministic: bool) -> usize {
    if deterministic {
        return 1;
    }
    match std::env::var("SFCMP_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(0) => 1,
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

/// Mini-batch SGD progress shared by consecutive phases of one lineage.
#[derive(Clone, Debug)]
pub struct TrainClock<'a> {
    pub schedule: &'a LrSchedule,
    pub batch_size: usize,
    pub n_train: usize,
    /// Optimizer iterations already spent on this lineage.
    pub done: usize,
}

impl TrainClock<'_> {
    pub fn epochs(&self) -> f64 {
        self.done as f64 * self.batch_size as f64 / self.n_train as f64
    }

    fn lr(&self) -> f64 {
        self.schedule.lr_at(self.epochs().floor() as usize)
    }
}

/// Runs `iterations` SGD steps with the configured loss. Batches are drawn
/// from fresh shuffled passes over `data`. Returns the per-step losses.
pub fn train_phase(
    model: &mut SparseModel,
    data: &Dataset,
    iterations: usize,
    loss: &EntropyConfig,
    clock: &mut TrainClock<'_>,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let bs = clock.batch_size.min(data.len());
    let mut losses = Vec::with_capacity(iterations);
    let mut rows = Vec::with_capacity(bs);
    for _ in 0..iterations {
        rows.clear();
        while rows.len() < bs {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            let take = (bs - rows.len()).min(order.len() - cursor);
            rows.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let x = data.features.select_rows(&rows);
        let y: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
        let (mut g, out) = model.forward(&x)?;
        let l = training_loss(&mut g, out, &y, loss)?;
        let value = g.value(l).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        g.backward(l, &mut model.store)?;
        sgd_step(&mut model.store, clock.lr())?;
        clock.done += 1;
        losses.push(value);
    }
    Ok(losses)
}

/// Cosine-annealed prune rate for outer iteration `i` of `expected`.
pub fn prune_rate_at(initial: f64, last: f64, i: usize, expected: usize) -> f64 {
    if expected <= 1 {
        return initial;
    }
    let t = (i.min(expected - 1)) as f64 / (expected - 1) as f64;
    last + 0.5 * (initial - last) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Fine-tuned candidate topology derived from the parent.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub pair: StrategyPair,
    pub model: SparseModel,
}

/// Shared inputs of one outer iteration's candidate generation.
pub struct CandidateContext<'a> {
    pub cfg: &'a RunConfig,
    pub train: &'a Dataset,
    pub grads: &'a [Tensor],
    pub prune_rate: f64,
    pub threshold: f64,
    pub iteration: usize,
    pub schedule: &'a LrSchedule,
    /// Lineage iterations before fine-tuning starts.
    pub done: usize,
}

fn candidate_rng(cfg: &RunConfig, iteration: usize, pair: StrategyPair, part: u64) -> StreamRng {
    let tag = StrategyPair::all().iter().position(|p| *p == pair).unwrap_or(0) as u64;
    rng::stream(cfg.seed, &[domain::CANDIDATE, iteration as u64, tag, part])
}

/// Sparse update plus fine-tuning for one pair. Degenerate updates are
/// reported through `Error::DegenerateCandidate`.
pub fn make_candidate(parent: &SparseModel, pair: StrategyPair, ctx: &CandidateContext<'_>) -> Result<Candidate> {
    let mut r = candidate_rng(ctx.cfg, ctx.iteration, pair, 0);
    let mut model = sparse_update(parent, pair, ctx.prune_rate, ctx.threshold, ctx.grads, &mut r)?.model;
    let mut clock = TrainClock {
        schedule: ctx.schedule,
        batch_size: ctx.cfg.batch_size,
        n_train: ctx.train.len(),
        done: ctx.done,
    };
    let iters = ctx.cfg.candidate_iters(ctx.train.len());
    let mut r = candidate_rng(ctx.cfg, ctx.iteration, pair, 1);
    train_phase(&mut model, ctx.train, iters, &ctx.cfg.loss, &mut clock, &mut r)?;
    Ok(Candidate { pair, model })
}

/// One candidate per pair in the strategy set, in that order; each entry is
/// either the candidate or the reason it was discarded.
pub fn generate_candidates(parent: &SparseModel, ctx: &CandidateContext<'_>) -> Vec<(StrategyPair, Result<Candidate>)> {
    ctx.cfg
        .strategies
        .iter()
        .map(|&pair| (pair, make_candidate(parent, pair, ctx)))
        .collect()
}

struct Scored {
    report: CandidateReport,
    model: SparseModel,
}

fn score_candidate(
    parent_attacker: &Attacker,
    cand: Candidate,
    ctx: &CandidateContext<'_>,
    splits: &AttackSplits,
    validation: &Dataset,
) -> Result<std::result::Result<Scored, DiscardNote>> {
    let cfg = ctx.cfg;
    let mut r = candidate_rng(cfg, ctx.iteration, cand.pair, 2);
    let attacker = finetune_attacker(parent_attacker, &cand.model, splits, cfg.attack.finetune_epochs, &cfg.attack, &mut r)?;
    let eval = evaluate_attack(&attacker, &cand.model, splits)?;
    let task_acc = task_accuracy(&cand.model, validation)?;
    let pair = ScorePair {
        task_acc,
        mia_acc: eval.mia_acc,
        lambda: cfg.lambda,
    };
    match tm_score(pair) {
        Ok(tm) => Ok(Ok(Scored {
            report: CandidateReport {
                pair: cand.pair,
                task_acc,
                mia_acc: eval.mia_acc,
                tm_score: tm,
                mia_gain: eval.mia_gain,
            },
            model: cand.model,
        })),
        Err(e) => Ok(Err(DiscardNote {
            pair: cand.pair,
            reason: e.to_string(),
        })),
    }
}

fn fan_out<T: Send, R: Send>(items: Vec<T>, workers: usize, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let mut queue: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    while !queue.is_empty() {
        let wave: Vec<(usize, T)> = queue.drain(..workers.min(queue.len())).collect();
        let done: Vec<(usize, R)> = std::thread::scope(|s| {
            let handles: Vec<_> = wave
                .into_iter()
                .map(|(i, item)| s.spawn(move || (i, f(item))))
                .collect();
            handles.into_iter().map(|h| h.join().expect("candidate worker panicked")).collect()
        });
        for (i, r) in done {
            slots[i] = Some(r);
        }
    }
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// Validation slice: the leading share of the known test half.
pub fn validation_slice(splits: &AttackSplits, fraction: f64) -> Result<Dataset> {
    let n = ((fraction * splits.known_test.len() as f64).round() as usize).clamp(1, splits.known_test.len());
    splits.known_test.head(n)
}

/// Outer iterations the epoch budget is expected to take.
pub fn expected_iterations(cfg: &RunConfig, n_train: usize) -> usize {
    let per = (cfg.inner_iterations + cfg.candidate_iters(n_train)) as f64 * cfg.batch_size as f64 / n_train as f64;
    if per <= 0.0 {
        1
    } else {
        ((cfg.total_epochs / per).ceil() as usize).max(1)
    }
}

/// The full loop. `sink` sees every report, with the selected model, as soon
/// as its iteration ends, so a failing run still leaves the finished
/// iterations behind.
pub fn run_safecompress(
    cfg: &RunConfig,
    spec: &TargetSpec,
    train: &Dataset,
    test: &Dataset,
    sink: &mut dyn FnMut(&IterationReport, &SparseModel) -> Result<()>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Dataset("train and test sets must be non-empty".into()));
    }
    let started = Instant::now();
    let splits = split_for_attack(train, test, &mut rng::stream(cfg.seed, &[domain::SPLIT]))?;
    let validation = validation_slice(&splits, cfg.validation_fraction)?;
    let probe = train.head(cfg.probe_size)?;
    let schedule = cfg.schedule()?;
    let mut model = build_target(spec, cfg.omega, &mut rng::stream(cfg.seed, &[domain::TARGET_INIT]))?;
    let active = model.active_count();

    let attacker_spec = AttackerSpec {
        mode: cfg.attack_mode,
        num_classes: spec.num_classes,
        gradient_len: model.last_layer_len().unwrap_or(0),
        widths: cfg.attacker.clone(),
    };
    let mut attacker = build_attacker(&attacker_spec, &mut rng::stream(cfg.seed, &[domain::ATTACKER_INIT]))?;
    let mut attacker_trained = false;

    let expected = expected_iterations(cfg, train.len());
    let workers = worker_count(cfg.deterministic);
    let mut threshold = cfg.threshold;
    let mut reports: Vec<IterationReport> = Vec::new();
    let mut done = 0usize;
    let mut stall = 0usize;
    let mut stopped_early = false;

    for iteration in 0.. {
        let mut clock = TrainClock {
            schedule: &schedule,
            batch_size: cfg.batch_size,
            n_train: train.len(),
            done,
        };
        let mut r = rng::stream(cfg.seed, &[domain::TARGET_TRAIN, iteration as u64]);
        train_phase(&mut model, train, cfg.inner_iterations, &cfg.loss, &mut clock, &mut r)?;
        done = clock.done;

        let (_, grads) = model.dense_gradients(&probe, &cfg.loss)?;
        let prune_rate = prune_rate_at(cfg.prune_rate, cfg.final_prune_rate, iteration, expected);
        let tau = *threshold.get_or_insert_with(|| quantile_threshold(&model, prune_rate));
        let ctx = CandidateContext {
            cfg,
            train,
            grads: &grads,
            prune_rate,
            threshold: tau,
            iteration,
            schedule: &schedule,
            done,
        };

        // Attacker against the new parent: full training once, then top-ups.
        let parent_set = training_examples(&model, &splits, cfg.attack_mode)?;
        let epochs = if attacker_trained { cfg.attack.refresh_epochs } else { cfg.attack.epochs };
        let mut r = rng::stream(cfg.seed, &[domain::ATTACKER_TRAIN, iteration as u64]);
        train_attacker(&mut attacker, &parent_set, epochs, &cfg.attack, &mut r)?;
        attacker_trained = true;

        let parent = &model;
        let outcomes = fan_out(cfg.strategies.clone(), workers, |pair| {
            let cand = match make_candidate(parent, pair, &ctx) {
                Ok(c) => c,
                Err(Error::DegenerateCandidate(reason)) => return Ok(Err(DiscardNote { pair, reason })),
                Err(e) => return Err(e),
            };
            score_candidate(&attacker, cand, &ctx, &splits, &validation)
        });

        let mut scored = Vec::new();
        let mut discarded = Vec::new();
        for o in outcomes {
            match o? {
                Ok(s) => scored.push(s),
                Err(note) => discarded.push(note),
            }
        }
        if scored.is_empty() {
            return Err(Error::Sparse(format!("iteration {iteration}: every candidate was discarded")));
        }
        let candidates: Vec<CandidateReport> = scored.iter().map(|s| s.report.clone()).collect();
        let best = select_best(&candidates)?;
        let selected = candidates[best].clone();
        model = scored.swap_remove(best).model;
        done += cfg.candidate_iters(train.len());
        debug_assert_eq!(model.active_count(), active);

        let epochs_so_far = done as f64 * cfg.batch_size as f64 / train.len() as f64;
        let report = IterationReport {
            iteration,
            candidates,
            discarded,
            selected: selected.pair,
            selected_tm_score: selected.tm_score,
            prune_rate,
            threshold: tau,
            active_weights: model.active_count(),
            sparsity: model.sparsity(),
            optimizer_iterations: done,
            cumulative_epochs: epochs_so_far,
            wall_time: (!cfg.deterministic).then(|| started.elapsed().as_secs_f64()),
        };
        sink(&report, &model)?;

        if let (Some(es), Some(prev)) = (&cfg.early_stop, reports.last()) {
            if report.selected_tm_score - prev.selected_tm_score < es.min_improvement {
                stall += 1;
            } else {
                stall = 0;
            }
            if stall >= es.patience {
                stopped_early = true;
            }
        }
        reports.push(report);
        if epochs_so_far >= cfg.total_epochs || stopped_early {
            break;
        }
    }

    Ok(RunOutcome {
        model,
        reports,
        splits,
        validation,
        attacker,
        optimizer_iterations: done,
        stopped_early,
    })
}
