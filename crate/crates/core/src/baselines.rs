//! Single-device comparison methods sharing the stream, model and
//! evaluation plumbing: naive SGD, experience replay, online EWC and the
//! multi-task upper bound.

use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Graph, Mode, OptimizerState, Real};
use crate::error::{Error, Result};
use crate::losses::{ewc_penalty, task_loss, update_fisher, FisherState};
use crate::model::Model;
use crate::protocol::{
    initial_model, CostLedger, RunReport, StepCost, StepFailure, StepRecord, StepSeeds,
};
use crate::replay::{draw_indices, exemplar_tensor, subsample_memory, Exemplar, Memory, Origin};
use crate::seeds;
use crate::streams::{
    batch_tensor, evaluate_cil, mean_accuracy, AccuracyHistory, ClassRange, MetricsRecord, Sample,
    Task, TaskStream,
};
use crate::training::{
    batch_seed, batches_per_epoch, draw_seed, sgd_update, shuffled_batches, TrainingConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Sgd,
    Er,
    Oewc,
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "er" => Ok(Self::Er),
            "oewc" => Ok(Self::Oewc),
            other => Err(Error::Unknown {
                what: "baseline method",
                value: other.to_string(),
            }),
        }
    }
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Er => "er",
            Self::Oewc => "oewc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub memory_capacity: usize,
    /// Weight of the replayed half of each ER batch.
    pub replay_coef: f64,
    pub ewc_penalty: f64,
    pub ewc_gamma: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            memory_capacity: 10_000,
            replay_coef: 1.0,
            ewc_penalty: 0.7,
            ewc_gamma: 1.0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self, method: BaselineMethod) -> Result<()> {
        match method {
            BaselineMethod::Sgd => {}
            BaselineMethod::Er => {
                if self.memory_capacity == 0 {
                    return Err(Error::Config("er needs memory_capacity >= 1".into()));
                }
                if !(self.replay_coef >= 0.0 && self.replay_coef.is_finite()) {
                    return Err(Error::Config("replay_coef must be finite and >= 0".into()));
                }
            }
            BaselineMethod::Oewc => {
                if !(self.ewc_penalty >= 0.0 && self.ewc_gamma >= 0.0) {
                    return Err(Error::Config("ewc_penalty and ewc_gamma must be >= 0".into()));
                }
            }
        }
        Ok(())
    }
}

/// Seed of the training order for task `t` of a run.
fn task_seed(seed: u64, t: usize) -> u64 {
    seeds::derive(seed, &[t as u64, 0x7a5c])
}

fn to_exemplars(task: &Task) -> impl Iterator<Item = Exemplar> + '_ {
    task.train.iter().map(|s| Exemplar {
        features: s.features.clone(),
        class_id: s.label,
        task_id: task.id,
        origin: Origin::Memory,
    })
}

/// Sequential single-model training over the stream with the chosen method.
pub fn run_baseline(
    stream: &TaskStream,
    method: BaselineMethod,
    cfg: &BaselineConfig,
    training: &TrainingConfig,
    seed: u64,
) -> Result<RunReport> {
    cfg.validate(method)?;
    training.validate()?;
    if stream.is_empty() {
        return Err(Error::Config("stream has no tasks".into()));
    }
    let start = Instant::now();
    let dim = stream.dim();
    let mut model = initial_model(stream, 1, training, seed)?;
    let mut fisher = FisherState::new(&model, cfg.ewc_gamma);
    let mut memory = Memory::new(cfg.memory_capacity);
    let mut ledger = CostLedger::new();
    let mut history = AccuracyHistory::new();
    let mut records = Vec::new();
    let mut failure = None;

    for (t, task) in stream.tasks().iter().enumerate() {
        let step_start = Instant::now();
        let result = (|| -> Result<()> {
            let needed = (task.classes.end() as usize).max(model.num_classes());
            model.grow_head(needed, StepSeeds::new(seed, t).head)?;
            let ts = task_seed(seed, t);
            match method {
                BaselineMethod::Sgd | BaselineMethod::Oewc => {
                    if method == BaselineMethod::Oewc {
                        fisher = fisher.grow_to(&model)?;
                    }
                    let penalty = (method == BaselineMethod::Oewc).then_some(cfg.ewc_penalty);
                    train_plain(&mut model, task, dim, training, ts, penalty.map(|p| (p, &fisher)))?;
                    if method == BaselineMethod::Oewc {
                        let (x, y) = batch_tensor::<f32>(&task.train, dim);
                        fisher = update_fisher(&model, &x, &y, &fisher)?;
                    }
                }
                BaselineMethod::Er => {
                    train_er(&mut model, task, &memory, dim, training, cfg.replay_coef, ts)?;
                    let pool: Vec<Exemplar> = memory
                        .exemplars()
                        .iter()
                        .cloned()
                        .chain(to_exemplars(task))
                        .collect();
                    memory = subsample_memory(&pool, cfg.memory_capacity, StepSeeds::new(seed, t).memory)?;
                }
            }
            Ok(())
        })();
        if let Err(e) = result {
            failure = Some(StepFailure {
                step: t,
                error: e.to_string(),
            });
            break;
        }
        let seen: Vec<&Task> = stream.tasks()[..=t].iter().collect();
        history.push(evaluate_cil(&model, &seen)?)?;
        let cost = (method == BaselineMethod::Er).then(|| StepCost {
            step: t,
            experts: 0,
            exemplar_bytes: memory.byte_size() as u64,
            model_bytes: model.to_param_vector().encoded_len() as u64,
            ..StepCost::default()
        });
        if let Some(c) = &cost {
            ledger.record(c.clone());
        }
        records.push(StepRecord {
            metrics: MetricsRecord::from_history(t, &history, step_start.elapsed().as_secs_f64()),
            cost,
        });
    }
    Ok(RunReport {
        method: method.name().into(),
        records,
        history,
        ledger: (method == BaselineMethod::Er).then_some(ledger),
        wall_secs: start.elapsed().as_secs_f64(),
        failure,
        final_model: Some(model),
    })
}

/// Task-loss epochs over one task, optionally plus an EWC penalty.
fn train_plain(
    model: &mut Model,
    task: &Task,
    dim: usize,
    training: &TrainingConfig,
    seed: u64,
    ewc: Option<(f64, &FisherState)>,
) -> Result<()> {
    let (x_all, y_all) = batch_tensor::<f32>(&task.train, dim);
    for epoch in 0..training.train_epochs {
        for (b, idx) in shuffled_batches(task.train.len(), training.batch_size, seed, epoch)
            .iter()
            .enumerate()
        {
            let mut g = Graph::new(batch_seed(seed, epoch, b));
            let x = x_all.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| y_all[i]).collect();
            let fwd = model.forward_batch(&mut g, &x, Mode::Train)?;
            let mut loss = task_loss(&mut g, fwd.logits, &y)?;
            if let Some((coef, fisher)) = ewc {
                let pen = ewc_penalty(&mut g, &fwd, fisher)?;
                let pen = g.scale(pen, coef);
                loss = g.add(loss, pen)?;
            }
            sgd_update(model, &g, &fwd, loss, training.lr)?;
        }
    }
    Ok(())
}

/// Each batch is half current-task examples and half uniform memory draws;
/// the replayed half is weighted by `replay_coef`.
fn train_er(
    model: &mut Model,
    task: &Task,
    memory: &Memory,
    dim: usize,
    training: &TrainingConfig,
    replay_coef: f64,
    seed: u64,
) -> Result<()> {
    let (x_all, y_all) = batch_tensor::<f32>(&task.train, dim);
    let (x_mem, y_mem) = exemplar_tensor::<f32>(memory.exemplars(), dim);
    let half = training.batch_size.div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(seed));
    for epoch in 0..training.train_epochs {
        for (b, idx) in shuffled_batches(task.train.len(), half, seed, epoch)
            .iter()
            .enumerate()
        {
            let mut g = Graph::new(batch_seed(seed, epoch, b));
            let mut x = x_all.select_rows(idx);
            let mut y: Vec<usize> = idx.iter().map(|&i| y_all[i]).collect();
            let n_cur = y.len();
            let mut weights = vec![1.0f32 / n_cur as f32; n_cur];
            if !memory.is_empty() {
                let m_idx = draw_indices(memory.len(), n_cur, &mut rng)?;
                let xm = x_mem.select_rows(&m_idx);
                let mut data = x.into_data();
                data.extend_from_slice(xm.data());
                x = crate::engine::Tensor::from_vec(2 * n_cur, dim, data);
                y.extend(m_idx.iter().map(|&i| y_mem[i]));
                weights.extend(std::iter::repeat(f32::of(replay_coef) / n_cur as f32).take(n_cur));
            }
            let fwd = model.forward_batch(&mut g, &x, Mode::Train)?;
            let loss = g.cross_entropy(fwd.logits, &y, Some(&weights))?;
            sgd_update(model, &g, &fwd, loss, training.lr)?;
        }
    }
    Ok(())
}

/// Plain experience-replay fine-tuning of `base` on batches drawn
/// uniformly with replacement from `pool`, with the same batch, dropout and
/// scheduler conventions as consolidation but no teachers.
pub fn rehearse(
    base: &Model,
    pool: &[Exemplar],
    alpha: f64,
    training: &TrainingConfig,
    seed: u64,
) -> Result<Model> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let (x_pool, y_pool) = exemplar_tensor::<f32>(pool, base.config().input_dim);
    let mut model = base.clone();
    let mut opt = OptimizerState::new(training.lr, training.plateau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(seed));
    let n_batches = batches_per_epoch(pool.len(), training.batch_size);
    for epoch in 0..training.rehearsal_epochs {
        let mut total = 0.0;
        for b in 0..n_batches {
            let idx = draw_indices(pool.len(), training.batch_size, &mut rng)?;
            let mut g = Graph::new(batch_seed(seed, epoch, b));
            let x = x_pool.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| y_pool[i]).collect();
            let fwd = model.forward_batch(&mut g, &x, Mode::Train)?;
            let ce = task_loss(&mut g, fwd.logits, &y)?;
            let loss = g.scale(ce, alpha);
            total += sgd_update(&mut model, &g, &fwd, loss, opt.lr())?;
        }
        opt.scheduler_step(total / n_batches as f64);
    }
    Ok(model)
}

/// Per-task accuracies of isolated models and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultitaskBound {
    pub per_task: Vec<f64>,
    pub mean: f64,
}

/// Run seed used for the isolated model of task `t`.
pub fn isolated_seed(seed: u64, t: usize) -> u64 {
    seeds::derive(seed, &[t as u64, 0x150])
}

/// Task `t` alone, with class ids shifted to start at zero.
pub fn isolate_task(task: &Task) -> Task {
    let shift = |s: &Sample| Sample {
        features: s.features.clone(),
        label: s.label - task.classes.start,
    };
    Task {
        id: task.id,
        classes: ClassRange {
            start: 0,
            count: task.classes.count,
        },
        train: task.train.iter().map(shift).collect(),
        val: task.val.iter().map(shift).collect(),
    }
}

/// Trains an independent model on every task with plain SGD and averages
/// their validation accuracies.
pub fn multitask_bound(stream: &TaskStream, training: &TrainingConfig, seed: u64) -> Result<MultitaskBound> {
    let mut per_task = Vec::with_capacity(stream.len());
    for (t, task) in stream.tasks().iter().enumerate() {
        let single = TaskStream::new(vec![isolate_task(task)], stream.dim())?;
        let r = run_baseline(
            &single,
            BaselineMethod::Sgd,
            &BaselineConfig::default(),
            training,
            isolated_seed(seed, t),
        )?;
        per_task.push(r.mean_accuracy());
    }
    Ok(MultitaskBound {
        mean: mean_accuracy(&per_task),
        per_task,
    })
}
