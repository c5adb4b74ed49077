//! Expert (worker) side of an incremental step.

use std::sync::mpsc::Sender;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::messages::{ExpertArtifact, Message, TrainingStats};
use crate::engine::{Graph, Mode};
use crate::error::{Error, Result};
use crate::losses::{l_exp, DistillKind};
use crate::model::{Model, ModelConfig, ParamVector};
use crate::replay::{sample_buffer, SamplingStrategy};
use crate::seeds;
use crate::streams::{batch_tensor, Task};
use crate::training::{batch_seed, sgd_update, shuffled_batches};

/// Hyper-parameters an expert needs; nothing else crosses into a worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertHyper {
    /// Architecture; the head size is taken from the synced parameters.
    pub model: ModelConfig,
    pub lambda: f64,
    pub distill: DistillKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub sampling: SamplingStrategy,
}

/// The complete execution context of one expert: its task, the synced base
/// parameters, hyper-parameters and a seed. There is deliberately no path
/// from here to the coordinator's memory.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerContext {
    pub expert_id: u32,
    pub task: Task,
    pub base: ParamVector,
    pub hyper: ExpertHyper,
    pub seed: u64,
}

impl WorkerContext {
    /// Builds a context from a received sync frame.
    pub fn from_sync(
        expert_id: u32,
        task: Task,
        sync_frame: &[u8],
        hyper: ExpertHyper,
        seed: u64,
    ) -> Result<Self> {
        match Message::decode(sync_frame)? {
            Message::Sync(base) => Ok(Self {
                expert_id,
                task,
                base,
                hyper,
                seed,
            }),
            _ => Err(Error::Protocol(format!(
                "expert {expert_id} expected a sync frame"
            ))),
        }
    }
}

/// Sending half handed to one expert. It accepts a single message.
#[derive(Debug)]
pub struct Outbox {
    expert_id: u32,
    tx: Sender<Vec<u8>>,
    sent: bool,
}

impl Outbox {
    pub fn new(expert_id: u32, tx: Sender<Vec<u8>>) -> Self {
        Self {
            expert_id,
            tx,
            sent: false,
        }
    }

    pub fn send(&mut self, frame: Vec<u8>) -> Result<()> {
        if self.sent {
            return Err(Error::Protocol(format!(
                "expert {} attempted a second message in one step",
                self.expert_id
            )));
        }
        self.sent = true;
        self.tx
            .send(frame)
            .map_err(|_| Error::Protocol("coordinator hung up".into()))
    }
}

/// Seed of the buffer selection for an expert seeded with `expert_seed`.
pub fn buffer_seed(expert_seed: u64) -> u64 {
    seeds::derive(expert_seed, &[1])
}

/// Initializes an expert from the base, trains it on its task under the
/// stability loss, and samples its buffer.
pub fn remote_train(ctx: &WorkerContext) -> Result<ExpertArtifact> {
    let start = Instant::now();
    let h = &ctx.hyper;
    let fail = |reason: String| Error::ExpertFailed {
        expert: ctx.expert_id,
        reason,
    };
    let base = Model::from_param_vector(&h.model, &ctx.base)?;
    let mut expert = base.clone();
    let dim = h.model.input_dim;
    let train = &ctx.task.train;
    let (x_all, y_all) = batch_tensor::<f32>(train, dim);
    let train_seed = seeds::derive(ctx.seed, &[0]);

    let mut final_loss = 0.0f64;
    for epoch in 0..h.epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(train.len(), h.batch_size, train_seed, epoch);
        for (b, idx) in batches.iter().enumerate() {
            let mut g = Graph::new(batch_seed(train_seed, epoch, b));
            let x = x_all.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| y_all[i]).collect();
            let (loss, fwd) = l_exp(&mut g, &expert, &base, &x, &y, h.lambda, h.distill, Mode::Train)?;
            let v = sgd_update(&mut expert, &g, &fwd, loss, h.lr)
                .map_err(|e| fail(format!("epoch {epoch} batch {b}: {e}")))?;
            total += v * idx.len() as f64;
        }
        final_loss = total / train.len().max(1) as f64;
        if !final_loss.is_finite() {
            return Err(fail(format!("epoch {epoch} loss is not finite")));
        }
    }

    let buffer = sample_buffer(
        &ctx.task,
        ctx.expert_id,
        h.buffer_capacity,
        h.sampling,
        &base,
        &expert,
        buffer_seed(ctx.seed),
    )?;
    Ok(ExpertArtifact {
        expert_id: ctx.expert_id,
        params: expert.to_param_vector(),
        buffer,
        stats: TrainingStats {
            epochs: h.epochs as u32,
            final_loss: final_loss as f32,
            wall_secs: start.elapsed().as_secs_f64(),
        },
    })
}

/// Runs one expert and sends exactly one frame: its artifact or a failure.
pub fn run_worker(ctx: WorkerContext, mut outbox: Outbox) -> Result<()> {
    let msg = match remote_train(&ctx) {
        Ok(a) => Message::Artifact(a),
        Err(e) => Message::Failure {
            expert_id: ctx.expert_id,
            reason: e.to_string(),
        },
    };
    outbox.send(msg.encode())
}
