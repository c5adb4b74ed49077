//! Exemplar stores: per-expert buffers, the central fixed-size memory, and
//! the consolidation pool built from both.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Real, Tensor};
use crate::error::{Error, Result};
use crate::losses::example_gradient;
use crate::model::Model;
use crate::streams::Task;

/// Where an exemplar in a pool came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    Memory,
    /// Buffer uploaded by the given expert.
    Buffer(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub features: Vec<f32>,
    pub class_id: u32,
    pub task_id: u32,
    pub origin: Origin,
}

impl Exemplar {
    /// Serialized size: features plus class and task ids.
    pub fn encoded_len(dim: usize) -> usize {
        4 * dim + 8
    }
}

/// Temporary per-expert store, sent once and then discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    owner: u32,
    capacity: usize,
    exemplars: Vec<Exemplar>,
}

impl Buffer {
    pub fn new(owner: u32, capacity: usize, exemplars: Vec<Exemplar>) -> Result<Self> {
        if exemplars.len() > capacity {
            return Err(Error::Config(format!(
                "buffer holds {} exemplars, capacity {capacity}",
                exemplars.len()
            )));
        }
        if let Some(first) = exemplars.first() {
            if exemplars.iter().any(|e| e.task_id != first.task_id) {
                return Err(Error::Config(format!(
                    "buffer of expert {owner} mixes tasks"
                )));
            }
        }
        Ok(Self {
            owner,
            capacity,
            exemplars,
        })
    }

    pub fn owner(&self) -> u32 {
        self.owner
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }
}

/// Central fixed-capacity store, visible only to the coordinator.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    capacity: usize,
    exemplars: Vec<Exemplar>,
}

impl Memory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            exemplars: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    /// Bytes held, using the same per-exemplar size as the wire format.
    pub fn byte_size(&self) -> usize {
        self.exemplars
            .iter()
            .map(|e| Exemplar::encoded_len(e.features.len()))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    #[default]
    Random,
    /// Largest per-example task-loss gradient norm under the base model.
    GradMaxBase,
    /// Smallest per-example task-loss gradient norm under the trained expert.
    GradMinExpert,
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "grad_max_base" => Ok(Self::GradMaxBase),
            "grad_min_expert" => Ok(Self::GradMinExpert),
            other => Err(Error::Unknown {
                what: "sampling strategy",
                value: other.to_string(),
            }),
        }
    }
}

/// L2 norm of the flattened trainable-parameter gradient of the task loss,
/// one example at a time, eval-mode normalization.
pub fn example_grad_norms(model: &Model, task: &Task) -> Result<Vec<f64>> {
    let dim = model.config().input_dim;
    task.train
        .iter()
        .map(|s| {
            let x = Tensor::from_vec(1, dim, s.features.clone());
            let grads = example_gradient(model, &x, s.label as usize)?;
            Ok(grads
                .iter()
                .map(|g| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
                .sum::<f64>()
                .sqrt())
        })
        .collect()
}

/// Indices of the `k` largest (or smallest) scores; ties go to the lower index.
fn rank(scores: &[f64], k: usize, largest: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = scores[a].total_cmp(&scores[b]);
        let ord = if largest { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Selects up to `capacity` training examples of `task` for the owner's buffer.
pub fn sample_buffer(
    task: &Task,
    owner: u32,
    capacity: usize,
    strategy: SamplingStrategy,
    base: &Model,
    expert: &Model,
    seed: u64,
) -> Result<Buffer> {
    let n = task.train.len();
    let chosen: Vec<usize> = if capacity >= n {
        (0..n).collect()
    } else {
        match strategy {
            SamplingStrategy::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut v = index::sample(&mut rng, n, capacity).into_vec();
                v.sort_unstable();
                v
            }
            SamplingStrategy::GradMaxBase => rank(&example_grad_norms(base, task)?, capacity, true),
            SamplingStrategy::GradMinExpert => {
                rank(&example_grad_norms(expert, task)?, capacity, false)
            }
        }
    };
    let exemplars = chosen
        .into_iter()
        .map(|i| Exemplar {
            features: task.train[i].features.clone(),
            class_id: task.train[i].label,
            task_id: task.id,
            origin: Origin::Buffer(owner),
        })
        .collect();
    Buffer::new(owner, capacity, exemplars)
}

/// Consolidation pool: memory first, then buffers in the given order.
pub fn merge_pool(memory: &Memory, buffers: &[Buffer]) -> Vec<Exemplar> {
    let mut pool = Vec::with_capacity(memory.len() + buffers.iter().map(Buffer::len).sum::<usize>());
    pool.extend(memory.exemplars.iter().map(|e| Exemplar {
        origin: Origin::Memory,
        ..e.clone()
    }));
    for b in buffers {
        pool.extend(b.exemplars.iter().cloned());
    }
    pool
}

/// Task-balanced random subsample of `pool` into a memory of `capacity`.
///
/// Every task gets a quota of `capacity / #tasks`, filled uniformly within
/// the task; slots left over by small tasks are filled uniformly from all
/// remaining exemplars. Selected exemplars keep pool order.
pub fn subsample_memory(pool: &[Exemplar], capacity: usize, seed: u64) -> Result<Memory> {
    if capacity == 0 {
        return Err(Error::Config("memory capacity must be > 0".into()));
    }
    let retag = |e: &Exemplar| Exemplar {
        origin: Origin::Memory,
        ..e.clone()
    };
    if pool.len() <= capacity {
        return Ok(Memory {
            capacity,
            exemplars: pool.iter().map(retag).collect(),
        });
    }
    let mut by_task: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, e) in pool.iter().enumerate() {
        by_task.entry(e.task_id).or_default().push(i);
    }
    let quota = capacity / by_task.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(capacity);
    let mut leftovers = Vec::new();
    for members in by_task.values() {
        if members.len() <= quota {
            keep.extend_from_slice(members);
            continue;
        }
        let mut picked = vec![false; members.len()];
        for j in index::sample(&mut rng, members.len(), quota) {
            picked[j] = true;
        }
        for (j, &i) in members.iter().enumerate() {
            if picked[j] {
                keep.push(i);
            } else {
                leftovers.push(i);
            }
        }
    }
    let remainder = capacity - keep.len();
    for j in index::sample(&mut rng, leftovers.len(), remainder.min(leftovers.len())) {
        keep.push(leftovers[j]);
    }
    keep.sort_unstable();
    Ok(Memory {
        capacity,
        exemplars: keep.into_iter().map(|i| retag(&pool[i])).collect(),
    })
}

/// `n` uniform indices into a pool of `len`, with replacement.
pub fn draw_indices<R: Rng>(len: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::EmptyPool);
    }
    Ok((0..n).map(|_| rng.gen_range(0..len)).collect())
}

/// Uniform draw with replacement across the whole pool.
pub fn draw_batch(pool: &[Exemplar], batch_size: usize, seed: u64) -> Result<Vec<Exemplar>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(draw_indices(pool.len(), batch_size, &mut rng)?
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

/// Stacks exemplar features into a matrix and returns class ids alongside.
pub fn exemplar_tensor<'a, T: Real>(
    exemplars: impl IntoIterator<Item = &'a Exemplar>,
    dim: usize,
) -> (Tensor<T>, Vec<usize>) {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for e in exemplars {
        debug_assert_eq!(e.features.len(), dim);
        data.extend(e.features.iter().map(|&v| T::of(v as f64)));
        labels.push(e.class_id as usize);
    }
    let n = labels.len();
    (Tensor::from_vec(n, dim, data), labels)
}
