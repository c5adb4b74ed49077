//! Minibatch plumbing shared by experts, consolidation and the baselines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Graph, NodeId, PlateauConfig};
use crate::error::{Error, Result};
use crate::model::{Architecture, Forward, Model};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr: f64,
    /// Epochs over each new task's training split.
    pub train_epochs: usize,
    /// Epochs over the consolidation pool per incremental step.
    pub rehearsal_epochs: usize,
    pub batch_size: usize,
    pub plateau: PlateauConfig,
    pub architecture: Architecture,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            train_epochs: 2,
            rehearsal_epochs: 100,
            batch_size: 64,
            plateau: PlateauConfig::default(),
            architecture: Architecture::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Seed of the dropout masks for one minibatch.
pub fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seeds::derive(seed, &[epoch as u64, batch as u64])
}

/// Seed of the index stream used to draw rehearsal batches.
pub fn draw_seed(seed: u64) -> u64 {
    seeds::derive(seed, &[u64::MAX])
}

/// One epoch of shuffled minibatch indices over `n` examples; the last batch
/// may be short.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[epoch as u64]));
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Number of with-replacement draws that make one pass over a pool.
pub fn batches_per_epoch(pool: usize, batch_size: usize) -> usize {
    pool.div_ceil(batch_size.max(1))
}

/// Backpropagates `loss`, applies SGD to the trainable entries and folds
/// train-mode norm statistics into the running estimates. Returns the loss.
/// Parameters are untouched when the loss or any gradient is non-finite.
pub fn sgd_update(
    model: &mut Model,
    g: &Graph<f32>,
    fwd: &Forward,
    loss: NodeId,
    lr: f64,
) -> Result<f64> {
    let grads = g.backward(loss)?;
    let grads = model.gradients(&grads, fwd);
    model.apply_gradients(&grads, lr)?;
    model.absorb_norm_stats(g, fwd);
    Ok(g.value(loss).item() as f64)
}
