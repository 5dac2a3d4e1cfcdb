//! Line-per-record JSON report stream.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orchestrator::{FinalEval, IterationReport};
use crate::sparse::StrategyPair;

/// Closing record of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: usize,
    pub tm_trajectory: Vec<f64>,
    pub selected: Vec<StrategyPair>,
    pub active_weights: usize,
    pub sparsity: f64,
    pub stopped_early: bool,
    /// Scores of the final model against a freshly trained attacker.
    pub final_eval: FinalEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum ReportRecord {
    Iteration(IterationReport),
    Summary(RunSummary),
}

/// Append-only writer; every record is flushed as soon as it is written.
pub struct ReportWriter {
    file: File,
}

impl ReportWriter {
    /// Starts a fresh stream, truncating any previous one.
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { file: File::create(path)? })
    }

    pub fn append(&mut self, record: &ReportRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Reads every complete record. A final line cut off mid-write is dropped;
/// a malformed line anywhere else is an error.
pub fn read_reports(path: &Path) -> Result<Vec<ReportRecord>> {
    let file = File::open(path)?;
    let lines: Vec<String> = BufReader::new(file).lines().collect::<std::io::Result<_>>()?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(Error::Config(format!("report line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

/// Human-readable table of a report stream.
pub fn render_table(records: &[ReportRecord]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:>4}  {:<20} {:>8} {:>8} {:>8} {:>9}  {:>8}\n",
        "iter", "candidate", "task", "mia", "tm", "gain", "epochs"
    ));
    for r in records {
        match r {
            ReportRecord::Iteration(it) => {
                for c in &it.candidates {
                    let mark = if c.pair == it.selected { "*" } else { " " };
                    s.push_str(&format!(
                        "{:>4}{} {:<20} {:>8.4} {:>8.4} {:>8.4} {:>9.2}  {:>8.2}\n",
                        it.iteration,
                        mark,
                        c.pair.to_string(),
                        c.task_acc,
                        c.mia_acc,
                        c.tm_score,
                        c.mia_gain,
                        it.cumulative_epochs
                    ));
                }
                for d in &it.discarded {
                    s.push_str(&format!("{:>4}  {:<20} discarded: {}\n", it.iteration, d.pair.to_string(), d.reason));
                }
            }
            ReportRecord::Summary(sm) => {
                s.push_str(&format!(
                    "final: task {:.4}  mia {:.4}  tm {:.4}  ({} iterations, density {:.4})\n",
                    sm.final_eval.task_acc, sm.final_eval.mia_acc, sm.final_eval.tm_score, sm.iterations, sm.sparsity
                ));
            }
        }
    }
    s
}
