//! Experiment runner: configs, record streams, sweeps and Pareto export.

mod config;
mod pareto;
mod stats;
mod sweep;

pub use config::{ExperimentConfig, Method, StreamSpec};
pub use pareto::{export_pareto, ParetoPoint};
pub use stats::{average_ranks, spearman};
pub use sweep::{run_sweep, sample_trial, trial_seed, ParamRange, SweepReport, SweepSpec, TrialRow};

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{multitask_bound, run_baseline};
use crate::error::{Error, Result};
use crate::protocol::{run_full_stream, RunReport, RunSummary, StepRecord};
use crate::streams::AccuracyHistory;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_CSV: &str = "summary.csv";

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Step(StepRecord),
    Summary(SummaryRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    #[serde(flatten)]
    pub summary: RunSummary,
    pub seed: u64,
    pub config: ExperimentConfig,
}

/// Command-line overrides applied on top of a config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub serial: bool,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
    /// Directory that relative stream paths resolve against.
    pub base_dir: Option<PathBuf>,
}

impl RunOptions {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.serial {
            cfg.bmc.serial = true;
        }
        if let Some(w) = self.workers {
            cfg.bmc.workers = w;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = Some(d.clone());
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: RunReport,
    pub summary: SummaryRecord,
}

/// Runs the configured method over its stream. Records are written when the
/// config names an output directory; a failed step still writes the partial
/// records and summary before the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let stream = cfg.stream.build(cfg.stream_seed(), base_dir)?;
    let report = match cfg.method {
        Method::Bmc => run_full_stream(&stream, &cfg.bmc, &cfg.training, cfg.seed)?,
        Method::Multitask => {
            let bound = multitask_bound(&stream, &cfg.training, cfg.seed)?;
            RunReport {
                method: "multitask".into(),
                records: Vec::new(),
                history: AccuracyHistory::from_rows(vec![bound.per_task])?,
                ledger: None,
                wall_secs: 0.0,
                failure: None,
                final_model: None,
            }
        }
        m => run_baseline(
            &stream,
            m.baseline().expect("baseline method"),
            &cfg.baseline,
            &cfg.training,
            cfg.seed,
        )?,
    };
    let summary = SummaryRecord {
        summary: report.summary(),
        seed: cfg.seed,
        config: cfg.clone(),
    };
    if let Some(dir) = &cfg.out_dir {
        write_records(dir, &report, &summary)?;
    }
    if let Some(f) = &report.failure {
        return Err(Error::Protocol(format!("step {} failed: {}", f.step, f.error)));
    }
    Ok(ExperimentOutcome { report, summary })
}

/// Writes `records.jsonl` (one step record per line, then the summary) and
/// a one-row `summary.csv`.
pub fn write_records(dir: &Path, report: &RunReport, summary: &SummaryRecord) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = std::io::BufWriter::new(File::create(dir.join(RECORDS_FILE))?);
    for r in &report.records {
        serde_json::to_writer(&mut w, &Record::Step(r.clone()))?;
        w.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut w, &Record::Summary(summary.clone()))?;
    w.write_all(b"\n")?;
    w.flush()?;

    let s = &summary.summary;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut csv = File::create(dir.join(SUMMARY_CSV))?;
    writeln!(csv, "method,seed,steps,tasks_seen,mean_acc,bwt,total_cost_mb,cost_accuracy,failed_step")?;
    writeln!(
        csv,
        "{},{},{},{},{},{},{},{},{}",
        s.method,
        summary.seed,
        s.steps,
        s.tasks_seen,
        s.mean_acc,
        opt(s.bwt),
        opt(s.total_cost_mb),
        opt(s.cost_accuracy),
        s.failure.as_ref().map_or(String::new(), |f| f.step.to_string())
    )?;
    Ok(())
}

/// Parses every line of a records file.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
