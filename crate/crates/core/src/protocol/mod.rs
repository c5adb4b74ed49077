//! Coordinator/expert orchestration of batch model consolidation.
//!
//! One incremental step: grow the base head for the step's classes, send a
//! sync frame to each of the `k` experts, let every expert train on its own
//! task and upload one artifact frame, distill all experts into the base on
//! the pooled memory and buffers, then subsample the memory. Steps are
//! functional: the caller's base and memory are never mutated, so a failed
//! step leaves them exactly as they were.

mod expert;
mod ledger;
mod messages;
mod report;

pub use expert::{buffer_seed, remote_train, run_worker, ExpertHyper, Outbox, WorkerContext};
pub use ledger::{cost_accuracy, CostLedger, StepCost};
pub use messages::{
    artifact_frame_len, sync_frame_len, ExpertArtifact, Message, Tag, TrainingStats,
    ARTIFACT_FIXED_BYTES, FRAME_HEADER_BYTES,
};
pub use report::{RunReport, RunSummary, StepFailure, StepRecord};

use std::collections::BTreeMap;
use std::sync::mpsc::{self, Receiver};
use std::thread;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Graph, Mode, OptimizerState};
use crate::error::{Error, Result};
use crate::losses::{l_base, DistillKind, LossCoefficients};
use crate::model::{Model, ModelConfig};
use crate::replay::{
    draw_indices, exemplar_tensor, merge_pool, subsample_memory, Exemplar, Memory,
    SamplingStrategy,
};
use crate::seeds;
use crate::streams::{evaluate_cil, AccuracyHistory, MetricsRecord, Task, TaskStream};
use crate::training::{batch_seed, batches_per_epoch, draw_seed, sgd_update, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BmcConfig {
    /// Experts per incremental step (k).
    pub experts: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub distill: DistillKind,
    pub buffer_capacity: usize,
    pub memory_capacity: usize,
    pub sampling: SamplingStrategy,
    /// Worker threads for expert training; 0 uses the available parallelism.
    pub workers: usize,
    /// Train experts one after another on the calling thread.
    pub serial: bool,
}

impl Default for BmcConfig {
    fn default() -> Self {
        Self {
            experts: 10,
            lambda: 1.0,
            alpha: 1.0,
            beta: 1.0,
            distill: DistillKind::Features,
            buffer_capacity: 10_000,
            memory_capacity: 10_000,
            sampling: SamplingStrategy::Random,
            workers: 0,
            serial: false,
        }
    }
}

impl BmcConfig {
    pub fn coefficients(&self) -> LossCoefficients {
        LossCoefficients {
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::Config("experts must be >= 1".into()));
        }
        if self.memory_capacity == 0 {
            return Err(Error::Config("memory_capacity must be >= 1".into()));
        }
        self.coefficients().validate()
    }

    fn worker_threads(&self, jobs: usize) -> usize {
        let n = if self.workers == 0 {
            thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        };
        n.clamp(1, jobs.max(1))
    }
}

/// Seed of the initial base model for a run.
pub fn init_seed(run_seed: u64) -> u64 {
    seeds::derive(run_seed, &[0x1417])
}

/// Independent seeds for every random choice inside one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSeeds {
    pub head: u64,
    pub consolidation: u64,
    pub memory: u64,
    experts: u64,
}

impl StepSeeds {
    pub fn new(run_seed: u64, step: usize) -> Self {
        let s = seeds::derive(run_seed, &[step as u64]);
        Self {
            head: seeds::derive(s, &[1]),
            consolidation: seeds::derive(s, &[2]),
            memory: seeds::derive(s, &[3]),
            experts: seeds::derive(s, &[4]),
        }
    }

    pub fn expert(&self, index: usize) -> u64 {
        seeds::derive(self.experts, &[index as u64])
    }
}

/// The tasks of one incremental step, one per expert in index order.
#[derive(Debug, Clone)]
pub struct StepPlan<'a> {
    pub step: usize,
    pub tasks: Vec<&'a Task>,
    pub seeds: StepSeeds,
}

impl<'a> StepPlan<'a> {
    pub fn new(step: usize, tasks: Vec<&'a Task>, run_seed: u64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("a step needs at least one task".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            if let Some(o) = tasks[..i].iter().find(|o| o.classes.overlaps(&t.classes)) {
                return Err(Error::Config(format!(
                    "tasks {} and {} in step {step} share class ids",
                    o.id, t.id
                )));
            }
        }
        Ok(Self {
            step,
            tasks,
            seeds: StepSeeds::new(run_seed, step),
        })
    }

    /// Head size needed to cover every class in the step.
    pub fn classes_needed(&self) -> usize {
        self.tasks.iter().map(|t| t.classes.end()).max().unwrap_or(0) as usize
    }
}

/// Receives frames until every sender hangs up and enforces the
/// one-message rule: exactly one frame from each expected expert.
/// Returns artifacts in expert-id order plus the bytes received.
pub fn collect_artifacts(
    rx: Receiver<Vec<u8>>,
    expected: &[u32],
) -> Result<(Vec<ExpertArtifact>, u64)> {
    let mut artifacts: BTreeMap<u32, ExpertArtifact> = BTreeMap::new();
    let mut failures: BTreeMap<u32, String> = BTreeMap::new();
    let mut bytes = 0u64;
    for frame in rx {
        bytes += frame.len() as u64;
        let (id, outcome) = match Message::decode(&frame)? {
            Message::Artifact(a) => (a.expert_id, Ok(a)),
            Message::Failure { expert_id, reason } => (expert_id, Err(reason)),
            Message::Sync(_) => return Err(Error::Protocol("expert sent a sync frame".into())),
        };
        if !expected.contains(&id) {
            return Err(Error::Protocol(format!("message from unknown expert {id}")));
        }
        if artifacts.contains_key(&id) || failures.contains_key(&id) {
            return Err(Error::Protocol(format!(
                "expert {id} sent a second message in one step"
            )));
        }
        match outcome {
            Ok(a) => {
                if a.buffer.owner() != id {
                    return Err(Error::Protocol(format!(
                        "expert {id} uploaded a buffer owned by {}",
                        a.buffer.owner()
                    )));
                }
                artifacts.insert(id, a);
            }
            Err(reason) => {
                failures.insert(id, reason);
            }
        }
    }
    if let Some((&expert, reason)) = failures.iter().next() {
        return Err(Error::ExpertFailed {
            expert,
            reason: reason.clone(),
        });
    }
    if artifacts.len() != expected.len() {
        return Err(Error::Protocol(format!(
            "expected {} artifact messages, received {}",
            expected.len(),
            artifacts.len()
        )));
    }
    Ok((artifacts.into_values().collect(), bytes))
}

/// Runs every context to completion and collects their artifacts. With
/// `serial` the experts run in the given order on the calling thread;
/// otherwise they are spread round-robin over `threads` scoped threads.
pub fn run_experts(
    contexts: Vec<WorkerContext>,
    serial: bool,
    threads: usize,
) -> Result<(Vec<ExpertArtifact>, u64)> {
    let expected: Vec<u32> = contexts.iter().map(|c| c.expert_id).collect();
    let (tx, rx) = mpsc::channel();
    if serial {
        for ctx in contexts {
            let id = ctx.expert_id;
            run_worker(ctx, Outbox::new(id, tx.clone()))?;
        }
    } else {
        let n = threads.clamp(1, contexts.len().max(1));
        let mut lanes: Vec<Vec<WorkerContext>> = (0..n).map(|_| Vec::new()).collect();
        for (i, c) in contexts.into_iter().enumerate() {
            lanes[i % n].push(c);
        }
        thread::scope(|s| {
            for lane in lanes {
                let tx = tx.clone();
                s.spawn(move || {
                    for ctx in lane {
                        let id = ctx.expert_id;
                        if let Err(e) = run_worker(ctx, Outbox::new(id, tx.clone())) {
                            log::error!("expert {id}: {e}");
                        }
                    }
                });
            }
        });
    }
    drop(tx);
    collect_artifacts(rx, &expected)
}

/// Distills every expert into the base on batches drawn uniformly with
/// replacement from `pool`. Experts are rebuilt on the coordinator from the
/// uploaded parameters and act as frozen teachers in train mode, replaying
/// the base's dropout masks (see [`l_base`](crate::losses::l_base)). The
/// plateau scheduler starts fresh and is discarded at the end of the episode.
pub fn consolidate(
    base: &Model,
    artifacts: &[ExpertArtifact],
    pool: &[Exemplar],
    cfg: &BmcConfig,
    training: &TrainingConfig,
    seed: u64,
) -> Result<Model> {
    if artifacts.is_empty() {
        return Err(Error::NoExperts);
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut experts = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        let e = Model::from_param_vector(base.config(), &a.params)?;
        if e.config() != base.config() {
            return Err(Error::Layout(format!(
                "expert {} does not match the base architecture",
                a.expert_id
            )));
        }
        experts.push(e);
    }
    let dim = base.config().input_dim;
    let (x_pool, y_pool) = exemplar_tensor::<f32>(pool, dim);

    let mut base = base.clone();
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
            let (loss, student) = l_base(
                &mut g,
                &base,
                &experts,
                &x,
                &y,
                cfg.alpha,
                cfg.beta,
                cfg.distill,
                Mode::Train,
            )?;
            total += sgd_update(&mut base, &g, &student, loss, opt.lr())?;
        }
        opt.scheduler_step(total / n_batches as f64);
    }
    Ok(base)
}

/// Result of a successful incremental step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub base: Model,
    pub memory: Memory,
    pub cost: StepCost,
    pub artifacts: Vec<ExpertArtifact>,
}

pub fn expert_hyper(cfg: &BmcConfig, training: &TrainingConfig, model: &ModelConfig) -> ExpertHyper {
    ExpertHyper {
        model: model.clone(),
        lambda: cfg.lambda,
        distill: cfg.distill,
        lr: training.lr,
        epochs: training.train_epochs,
        batch_size: training.batch_size,
        buffer_capacity: cfg.buffer_capacity,
        sampling: cfg.sampling,
    }
}

/// Sync, parallel expert training, consolidation and memory subsampling.
/// `base` and `memory` are only read.
pub fn run_incremental_step(
    base: &Model,
    memory: &Memory,
    plan: &StepPlan,
    cfg: &BmcConfig,
    training: &TrainingConfig,
) -> Result<StepOutcome> {
    let mut base = base.clone();
    base.grow_head(plan.classes_needed().max(base.num_classes()), plan.seeds.head)?;
    let pv = base.to_param_vector();
    let sync = Message::Sync(pv.clone()).encode();
    let hyper = expert_hyper(cfg, training, base.config());

    let mut broadcast_bytes = 0u64;
    let mut contexts = Vec::with_capacity(plan.tasks.len());
    for (i, task) in plan.tasks.iter().enumerate() {
        broadcast_bytes += sync.len() as u64;
        contexts.push(WorkerContext::from_sync(
            i as u32,
            (*task).clone(),
            &sync,
            hyper.clone(),
            plan.seeds.expert(i),
        )?);
    }
    let threads = cfg.worker_threads(contexts.len());
    let (artifacts, upload_bytes) = run_experts(contexts, cfg.serial, threads)?;

    let buffers: Vec<_> = artifacts.iter().map(|a| a.buffer.clone()).collect();
    let pool = merge_pool(memory, &buffers);
    let base = consolidate(&base, &artifacts, &pool, cfg, training, plan.seeds.consolidation)?;
    let memory = subsample_memory(&pool, cfg.memory_capacity, plan.seeds.memory)?;

    let cost = StepCost {
        step: plan.step,
        experts: artifacts.len(),
        broadcast_bytes,
        upload_bytes,
        exemplar_bytes: pool
            .iter()
            .map(|e| Exemplar::encoded_len(e.features.len()) as u64)
            .sum(),
        expert_param_bytes: artifacts.iter().map(|a| a.params.encoded_len() as u64).sum(),
        model_bytes: base.to_param_vector().encoded_len() as u64,
    };
    Ok(StepOutcome {
        base,
        memory,
        cost,
        artifacts,
    })
}

/// Initial base model for a stream: head sized for the first `first_tasks` tasks.
pub fn initial_model(
    stream: &TaskStream,
    first_tasks: usize,
    training: &TrainingConfig,
    run_seed: u64,
) -> Result<Model> {
    let classes = stream.tasks()[..first_tasks.clamp(1, stream.len())]
        .iter()
        .map(|t| t.classes.end())
        .max()
        .unwrap_or(1) as usize;
    let cfg = ModelConfig::new(stream.dim(), classes, &training.architecture);
    Model::build(&cfg, init_seed(run_seed))
}

/// Runs consecutive `k`-task steps over the whole stream (the last step may
/// have fewer experts) and evaluates on every task seen after each step.
pub fn run_full_stream(
    stream: &TaskStream,
    cfg: &BmcConfig,
    training: &TrainingConfig,
    seed: u64,
) -> Result<RunReport> {
    cfg.validate()?;
    training.validate()?;
    if stream.is_empty() {
        return Err(Error::Config("stream has no tasks".into()));
    }
    let start = Instant::now();
    let mut base = initial_model(stream, cfg.experts, training, seed)?;
    let mut memory = Memory::new(cfg.memory_capacity);
    let mut ledger = CostLedger::new();
    let mut history = AccuracyHistory::new();
    let mut records = Vec::new();
    let mut failure = None;
    let mut seen: Vec<&Task> = Vec::new();

    for (step, chunk) in stream.tasks().chunks(cfg.experts).enumerate() {
        let step_start = Instant::now();
        let plan = StepPlan::new(step, chunk.iter().collect(), seed)?;
        let out = match run_incremental_step(&base, &memory, &plan, cfg, training) {
            Ok(out) => out,
            Err(e) => {
                log::warn!("step {step} failed: {e}");
                failure = Some(StepFailure {
                    step,
                    error: e.to_string(),
                });
                break;
            }
        };
        base = out.base;
        memory = out.memory;
        seen.extend(chunk);
        history.push(evaluate_cil(&base, &seen)?)?;
        ledger.record(out.cost.clone());
        records.push(StepRecord {
            metrics: MetricsRecord::from_history(step, &history, step_start.elapsed().as_secs_f64()),
            cost: Some(out.cost),
        });
        log::info!(
            "step {step}: {} tasks seen, mean acc {:.4}",
            seen.len(),
            records.last().map_or(0.0, |r| r.metrics.mean_acc)
        );
    }
    Ok(RunReport {
        method: "bmc".into(),
        records,
        history,
        ledger: Some(ledger),
        wall_secs: start.elapsed().as_secs_f64(),
        failure,
        final_model: Some(base),
    })
}
