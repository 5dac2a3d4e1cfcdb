//! Experiment runner: configuration, datasets, checkpoints, reports and the
//! subcommands built on them.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod report;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use dataset::{load_dataset, shape_features, standardize, DatasetSource};
pub use report::{read_reports, render_table, ReportRecord, ReportWriter, RunSummary};

use crate::attack::{evaluate_attack, split_for_attack, train_attacker, training_examples};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, standard_cases, TOLERANCE};
use crate::metrics::{task_accuracy, tm_score, ScorePair};
use crate::models::{build_attacker, AttackMode, AttackerSpec, Classifier};
use crate::orchestrator::{final_evaluation, run_safecompress};
use crate::rng::{self, domain};

#[derive(Debug, Parser)]
#[command(name = "safecompress", version, about = "Sparse compression with membership-inference-aware topology selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by commands that read an experiment file.
#[derive(Debug, Clone, clap::Args)]
pub struct RunFlags {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sequential execution and a byte-reproducible report stream.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Blackbox,
    Whitebox,
}

impl From<ModeArg> for AttackMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Blackbox => AttackMode::Blackbox,
            ModeArg::Whitebox => AttackMode::Whitebox,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the compression loop described by a config file.
    Run(RunFlags),
    /// Train a fresh attacker against a checkpoint and report its accuracy.
    AttackEval {
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Must agree with the config's attack mode when both are given.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Finite-difference check of every layer and loss.
    Gradcheck,
    /// Pretty-print a report stream.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn load_config(flags: &RunFlags) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&flags.config)?;
    if let Some(seed) = flags.seed {
        cfg.run.seed = seed;
    }
    if flags.deterministic {
        cfg.run.deterministic = true;
    }
    if let Some(dir) = &flags.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn prepared_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = load_dataset(&cfg.dataset)?;
    for d in [&mut train, &mut test] {
        shape_features(d, &cfg.target.input_shape)?;
        if d.num_classes != cfg.target.num_classes {
            if d.labels.iter().any(|&y| y >= cfg.target.num_classes) {
                return Err(Error::Dataset(format!(
                    "labels exceed the target's {} classes",
                    cfg.target.num_classes
                )));
            }
            d.num_classes = cfg.target.num_classes;
        }
    }
    Ok((train, test))
}

/// Executes the loop, writing a checkpoint and a report line per iteration
/// and a final summary line.
pub fn run_experiment(cfg: &ExperimentConfig, log: &mut dyn std::io::Write) -> Result<RunSummary> {
    let (train, test) = prepared_data(cfg)?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    let mut writer = ReportWriter::create(&dir.join("report.jsonl"))?;
    let seed = cfg.run.seed;
    let mut sink = |r: &crate::orchestrator::IterationReport, m: &crate::sparse::SparseModel| -> Result<()> {
        writer.append(&ReportRecord::Iteration(r.clone()))?;
        Checkpoint {
            model: m.clone(),
            iteration: r.iteration as u64,
            seed,
        }
        .save(&dir.join("checkpoints").join(format!("iter_{:04}.sfcmp", r.iteration)))?;
        let _ = writeln!(
            log,
            "iteration {:>3}: selected {} (tm {:.4}), epochs {:.2}",
            r.iteration, r.selected, r.selected_tm_score, r.cumulative_epochs
        );
        Ok(())
    };
    let outcome = run_safecompress(&cfg.run, &cfg.target, &train, &test, &mut sink)?;
    Checkpoint {
        model: outcome.model.clone(),
        iteration: outcome.reports.len().saturating_sub(1) as u64,
        seed,
    }
    .save(&dir.join("final.sfcmp"))?;
    let final_eval = final_evaluation(&outcome.model, &outcome.splits, &test, &cfg.run, 0)?;
    let summary = RunSummary {
        iterations: outcome.reports.len(),
        tm_trajectory: outcome.reports.iter().map(|r| r.selected_tm_score).collect(),
        selected: outcome.reports.iter().map(|r| r.selected).collect(),
        active_weights: outcome.model.active_count(),
        sparsity: outcome.model.sparsity(),
        stopped_early: outcome.stopped_early,
        final_eval,
    };
    writer.append(&ReportRecord::Summary(summary.clone()))?;
    Ok(summary)
}

/// Result of evaluating a stored model.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackEvalOutcome {
    pub task_acc: f64,
    pub mia_acc: f64,
    pub mia_gain: f64,
    pub tm_score: f64,
    pub per_class: Vec<f64>,
}

/// Rebuilds the attack splits from the checkpoint's seed and trains a fresh
/// attacker against the stored model.
pub fn attack_eval(cfg: &ExperimentConfig, checkpoint: &Path, mode: Option<AttackMode>) -> Result<AttackEvalOutcome> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.model.spec != cfg.target {
        return Err(Error::Checkpoint("checkpoint architecture differs from the config's target".into()));
    }
    if let Some(m) = mode {
        if m != cfg.run.attack_mode {
            return Err(Error::Config(format!(
                "requested {m:?} attack but the config's attacker is {:?}",
                cfg.run.attack_mode
            )));
        }
    }
    let (train, test) = prepared_data(cfg)?;
    let splits = split_for_attack(&train, &test, &mut rng::stream(ck.seed, &[domain::SPLIT]))?;
    let model = &ck.model;
    let spec = AttackerSpec {
        mode: cfg.run.attack_mode,
        num_classes: model.num_classes(),
        gradient_len: model.last_layer_len().unwrap_or(0),
        widths: cfg.run.attacker.clone(),
    };
    let seed = cfg.run.seed;
    let mut attacker = build_attacker(&spec, &mut rng::stream(seed, &[domain::FINAL_EVAL, 1, 0]))?;
    let set = training_examples(model, &splits, spec.mode)?;
    train_attacker(&mut attacker, &set, cfg.run.attack.epochs, &cfg.run.attack, &mut rng::stream(seed, &[domain::FINAL_EVAL, 1, 1]))?;
    let eval = evaluate_attack(&attacker, model, &splits)?;
    let task_acc = task_accuracy(model, &test)?;
    Ok(AttackEvalOutcome {
        task_acc,
        mia_acc: eval.mia_acc,
        mia_gain: eval.mia_gain,
        tm_score: tm_score(ScorePair {
            task_acc,
            mia_acc: eval.mia_acc,
            lambda: cfg.run.lambda,
        })?,
        per_class: eval.per_class,
    })
}

/// Runs the command, writing human output to `out`.
pub fn execute(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::Run(flags) => {
            let cfg = load_config(&flags)?;
            let s = run_experiment(&cfg, out)?;
            writeln!(
                out,
                "final model: task acc {:.4}, MIA acc {:.4}, TM-score {:.4} ({} active weights, density {:.4})",
                s.final_eval.task_acc, s.final_eval.mia_acc, s.final_eval.tm_score, s.active_weights, s.sparsity
            )?;
        }
        Command::AttackEval { flags, checkpoint, mode } => {
            let cfg = load_config(&flags)?;
            let r = attack_eval(&cfg, &checkpoint, mode.map(Into::into))?;
            writeln!(out, "task acc {:.4}", r.task_acc)?;
            writeln!(out, "MIA acc  {:.4}", r.mia_acc)?;
            writeln!(out, "MIA gain {:.4}", r.mia_gain)?;
            writeln!(out, "TM-score {:.4}", r.tm_score)?;
            for (c, acc) in r.per_class.iter().enumerate() {
                writeln!(out, "  class {c}: MIA acc {acc:.4}")?;
            }
        }
        Command::Gradcheck => {
            let cases = standard_cases(&mut rng::stream(0, &[0xfd]));
            let report = run_gradcheck(&cases)?;
            for (name, err) in &report.cases {
                writeln!(out, "{name:<28} {err:.3e}")?;
            }
            writeln!(out, "max relative error {:.3e} (tolerance {TOLERANCE:.0e})", report.max_error())?;
        }
        Command::Report { input } => {
            let records = read_reports(&input)?;
            write!(out, "{}", render_table(&records))?;
        }
    }
    Ok(())
}
