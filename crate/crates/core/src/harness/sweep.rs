//! Uniform random search over experiment hyper-parameters.
//!
//! ```toml
//! trials = 30
//! master_seed = 7
//!
//! [params."bmc.lambda"]
//! uniform = [0.0, 2.0]
//! [params."bmc.buffer_capacity"]
//! int_uniform = [100, 400]
//! [params."bmc.sampling"]
//! choice = ["random", "grad_max_base"]
//!
//! [base]            # a complete experiment config
//! method = "bmc"
//! ...
//! ```
//!
//! Parameter names are dotted paths into the experiment config.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_experiment, spearman, ExperimentConfig};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ParamRange {
    /// Continuous, inclusive bounds.
    Uniform([f64; 2]),
    /// Integer, inclusive bounds.
    IntUniform([i64; 2]),
    Choice(Vec<toml::Value>),
}

impl ParamRange {
    fn validate(&self, name: &str) -> Result<()> {
        let ok = match self {
            ParamRange::Uniform([lo, hi]) => lo.is_finite() && hi.is_finite() && lo <= hi,
            ParamRange::IntUniform([lo, hi]) => lo <= hi,
            ParamRange::Choice(v) => !v.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("empty or inverted range for {name}")))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> toml::Value {
        match self {
            ParamRange::Uniform([lo, hi]) => {
                let u: f64 = rng.gen();
                toml::Value::Float(lo + (hi - lo) * u)
            }
            ParamRange::IntUniform([lo, hi]) => toml::Value::Integer(rng.gen_range(*lo..=*hi)),
            ParamRange::Choice(v) => v[rng.gen_range(0..v.len())].clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub trials: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub params: BTreeMap<String, ParamRange>,
    pub base: ExperimentConfig,
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        for (name, r) in &self.params {
            r.validate(name)?;
        }
        sample_trial(self, 0).map(|_| ())
    }
}

/// Seed of trial `index`; a pure function of the master seed and the index.
pub fn trial_seed(master_seed: u64, index: usize) -> u64 {
    seeds::derive(master_seed, &[index as u64])
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty());
    let last = last.ok_or_else(|| Error::Config(format!("bad parameter path {path:?}")))?;
    let mut cur = root;
    for p in parts {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{path}: {p} is not a table")))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Error::Config(format!("{path}: parent is not a table")))?
        .insert(last.to_string(), value);
    Ok(())
}

/// Config and sampled values for trial `index`. Parameters are drawn in
/// name order from a generator seeded by the trial seed, which also becomes
/// the run seed.
pub fn sample_trial(
    spec: &SweepSpec,
    index: usize,
) -> Result<(ExperimentConfig, BTreeMap<String, toml::Value>)> {
    let seed = trial_seed(spec.master_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut root = toml::Value::try_from(&spec.base).map_err(|e| Error::Config(e.to_string()))?;
    let mut sampled = BTreeMap::new();
    for (name, range) in &spec.params {
        let v = range.sample(&mut rng);
        set_path(&mut root, name, v.clone())?;
        sampled.insert(name.clone(), v);
    }
    let mut cfg: ExperimentConfig = root
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("trial {index}: {e}")))?;
    cfg.seed = seed;
    cfg.validate()?;
    Ok((cfg, sampled))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub params: BTreeMap<String, toml::Value>,
    pub mean_acc: Option<f64>,
    pub bwt: Option<f64>,
    pub total_cost_mb: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<TrialRow>,
}

impl SweepReport {
    /// Spearman correlation between a numeric parameter and mean accuracy
    /// over the successful trials.
    pub fn correlation(&self, param: &str) -> Result<f64> {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .rows
            .iter()
            .filter_map(|r| {
                let v = match r.params.get(param)? {
                    toml::Value::Float(f) => *f,
                    toml::Value::Integer(i) => *i as f64,
                    _ => return None,
                };
                Some((v, r.mean_acc?))
            })
            .unzip();
        spearman(&x, &y)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut jsonl = std::io::BufWriter::new(std::fs::File::create(dir.join("sweep.jsonl"))?);
        for r in &self.rows {
            serde_json::to_writer(&mut jsonl, r)?;
            jsonl.write_all(b"\n")?;
        }
        jsonl.flush()?;

        let names: Vec<&String> = self.rows.first().map(|r| r.params.keys().collect()).unwrap_or_default();
        let mut csv = std::fs::File::create(dir.join("sweep.csv"))?;
        let mut header = vec!["trial".to_string(), "seed".into()];
        header.extend(names.iter().map(|n| n.to_string()));
        header.extend(["mean_acc", "bwt", "total_cost_mb", "error"].map(String::from));
        writeln!(csv, "{}", header.join(","))?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            let mut cells = vec![r.trial.to_string(), r.seed.to_string()];
            cells.extend(names.iter().map(|n| match &r.params[*n] {
                toml::Value::String(s) => s.clone(),
                v => v.to_string(),
            }));
            cells.push(opt(r.mean_acc));
            cells.push(opt(r.bwt));
            cells.push(opt(r.total_cost_mb));
            cells.push(r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"));
            writeln!(csv, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Runs every trial (in parallel unless `serial`); a failing trial is
/// recorded in its row and the sweep carries on. Trial outputs go to
/// `out_dir/trial_NNNN` when `out_dir` is given.
pub fn run_sweep(
    spec: &SweepSpec,
    out_dir: Option<&Path>,
    base_dir: Option<&Path>,
    serial: bool,
) -> Result<SweepReport> {
    spec.validate()?;
    let run_one = |i: usize| -> TrialRow {
        let seed = trial_seed(spec.master_seed, i);
        let mut row = TrialRow {
            trial: i,
            seed,
            params: BTreeMap::new(),
            mean_acc: None,
            bwt: None,
            total_cost_mb: None,
            error: None,
        };
        let outcome = sample_trial(spec, i).and_then(|(mut cfg, params)| {
            row.params = params;
            cfg.out_dir = out_dir.map(|d| d.join(format!("trial_{i:04}")));
            if serial {
                cfg.bmc.serial = true;
            }
            run_experiment(&cfg, base_dir)
        });
        match outcome {
            Ok(o) => {
                row.mean_acc = Some(o.summary.summary.mean_acc);
                row.bwt = o.summary.summary.bwt;
                row.total_cost_mb = o.summary.summary.total_cost_mb;
            }
            Err(e) => {
                log::warn!("trial {i} failed: {e}");
                row.error = Some(e.to_string());
            }
        }
        row
    };
    let rows: Vec<TrialRow> = if serial {
        (0..spec.trials).map(run_one).collect()
    } else {
        (0..spec.trials).into_par_iter().map(run_one).collect()
    };
    let report = SweepReport { rows };
    if let Some(d) = out_dir {
        report.write(d)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(extra: &str) -> String {
        format!(
            r#"
trials = 4
master_seed = 9
{extra}

[base]
method = "sgd"

[base.stream]
kind = "split_synthetic"
n_tasks = 2
classes_per_task = 2
dim = 4
train_per_task = 16
val_per_task = 8

[base.training]
batch_size = 8
train_epochs = 1

[base.training.architecture]
res_dim = 6
hidden_dim = 5
res_layers_per_block = 1
"#
        )
    }

    #[test]
    fn trial_sampling_is_pure_and_in_range() {
        let s = SweepSpec::from_toml(&spec(
            "[params.\"bmc.lambda\"]\nuniform = [0.0, 2.0]\n[params.\"training.lr\"]\nchoice = [0.05, 0.1]",
        ))
        .unwrap();
        let (a, pa) = sample_trial(&s, 2).unwrap();
        let (b, pb) = sample_trial(&s, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!((0.0..=2.0).contains(&a.bmc.lambda));
        assert!(a.training.lr == 0.05 || a.training.lr == 0.1);
        assert_eq!(a.seed, trial_seed(9, 2));
        let (c, _) = sample_trial(&s, 3).unwrap();
        assert_ne!(a.bmc.lambda, c.bmc.lambda);
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(SweepSpec::from_toml(&spec("[params.\"bmc.lambda\"]\nuniform = [2.0, 0.0]")).is_err());
        assert!(SweepSpec::from_toml(&spec("[params.\"bmc.lambda\"]\nchoice = []")).is_err());
        assert!(SweepSpec::from_toml(&spec("[params.\"bmc.lamda\"]\nuniform = [0.0, 1.0]")).is_err());
        assert!(SweepSpec::from_toml(&spec("").replace("trials = 4", "trials = 0")).is_err());
    }

    #[test]
    fn sweep_writes_rows_and_trial_dirs() {
        let s = SweepSpec::from_toml(&spec("[params.\"training.lr\"]\nuniform = [0.01, 0.2]")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = run_sweep(&s, Some(dir.path()), None, true).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.rows.iter().all(|row| row.error.is_none() && row.mean_acc.is_some()));
        assert!(dir.path().join("trial_0003").join(super::super::RECORDS_FILE).exists());
        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("trial,seed,training.lr,mean_acc"));
        let par = run_sweep(&s, None, None, false).unwrap();
        assert_eq!(par.rows, r.rows);
    }

    #[test]
    fn failures_do_not_stop_the_sweep() {
        let text = spec("").replace(
            "kind = \"split_synthetic\"\nn_tasks = 2\nclasses_per_task = 2\ndim = 4\ntrain_per_task = 16\nval_per_task = 8",
            "kind = \"file\"\npath = \"/nonexistent/stream.bin\"",
        );
        let s = SweepSpec::from_toml(&text).unwrap();
        let r = run_sweep(&s, None, None, true).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.rows.iter().all(|row| row.error.is_some() && row.mean_acc.is_none()));
    }
}
