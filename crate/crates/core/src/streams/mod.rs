//! Task streams: generation, ingestion and class-incremental evaluation.

mod eval;
mod format;

pub use eval::{
    backward_transfer, evaluate_cil, first_task_curve, mean_accuracy, predict, AccuracyHistory,
    MetricsRecord,
};
pub use format::{
    load_feature_stream, read_stream, save_stream, write_stream, LoadReport, Rebase,
    STREAM_MAGIC, STREAM_VERSION,
};

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::{Real, Tensor};
use crate::error::{Error, Result};

/// One labeled example; `label` is a global class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f32>,
    pub label: u32,
}

/// Half-open range of global class ids owned by a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRange {
    pub start: u32,
    pub count: u32,
}

impl ClassRange {
    pub fn end(&self) -> u32 {
        self.start + self.count
    }

    pub fn contains(&self, class: u32) -> bool {
        class >= self.start && class < self.end()
    }

    pub fn overlaps(&self, other: &ClassRange) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: u32,
    pub classes: ClassRange,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    tasks: Vec<Task>,
    dim: usize,
}

impl TaskStream {
    /// Checks class-range disjointness, label ranges, feature dims and
    /// non-empty validation splits.
    pub fn new(tasks: Vec<Task>, dim: usize) -> Result<Self> {
        for (i, t) in tasks.iter().enumerate() {
            if t.val.is_empty() {
                return Err(Error::Config(format!("task {} has no validation data", t.id)));
            }
            for s in t.train.iter().chain(&t.val) {
                if s.features.len() != dim {
                    return Err(Error::Config(format!(
                        "task {} has a {}-dim example, stream dim is {dim}",
                        t.id,
                        s.features.len()
                    )));
                }
                if !t.classes.contains(s.label) {
                    return Err(Error::Config(format!(
                        "task {} label {} outside its class range {:?}",
                        t.id, s.label, t.classes
                    )));
                }
            }
            if let Some(o) = tasks[..i].iter().find(|o| o.classes.overlaps(&t.classes)) {
                return Err(Error::Config(format!(
                    "tasks {} and {} share class ids",
                    o.id, t.id
                )));
            }
        }
        Ok(Self { tasks, dim })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Size of the class universe (one past the largest class id).
    pub fn total_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.classes.end()).max().unwrap_or(0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    /// One base dataset, re-presented under a fixed input permutation per task.
    Permuted,
    /// Independent Gaussian clusters per class.
    SplitSynthetic,
}

impl FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "permuted" => Ok(Self::Permuted),
            "split_synthetic" => Ok(Self::SplitSynthetic),
            other => Err(Error::Unknown {
                what: "stream kind",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamParams {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub train_per_task: usize,
    pub val_per_task: usize,
    /// Standard deviation of class centers; 0 makes all classes identical.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Standard deviation of examples around their center.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_separation() -> f64 {
    3.0
}

fn default_noise() -> f64 {
    1.0
}

impl StreamParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0
            || self.classes_per_task == 0
            || self.dim == 0
            || self.train_per_task == 0
            || self.val_per_task == 0
        {
            return Err(Error::Config(
                "stream sizes (n_tasks, classes_per_task, dim, train, val) must be >= 1".into(),
            ));
        }
        if !(self.separation >= 0.0 && self.noise >= 0.0) {
            return Err(Error::Config("separation and noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Deterministic in `(kind, params, seed)`.
pub fn generate_stream(kind: StreamKind, params: &StreamParams, seed: u64) -> Result<TaskStream> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = params.classes_per_task;
    let tasks = match kind {
        StreamKind::Permuted => {
            let centers = draw_centers(&mut rng, c, params);
            let base_train = draw_split(&mut rng, &centers, params.train_per_task, params);
            let base_val = draw_split(&mut rng, &centers, params.val_per_task, params);
            (0..params.n_tasks)
                .map(|t| {
                    let mut perm: Vec<usize> = (0..params.dim).collect();
                    if t > 0 {
                        perm.shuffle(&mut rng);
                    }
                    let offset = (t * c) as u32;
                    let remap = |s: &Sample| Sample {
                        features: perm.iter().map(|&j| s.features[j]).collect(),
                        label: s.label + offset,
                    };
                    Task {
                        id: t as u32,
                        classes: ClassRange {
                            start: offset,
                            count: c as u32,
                        },
                        train: base_train.iter().map(remap).collect(),
                        val: base_val.iter().map(remap).collect(),
                    }
                })
                .collect()
        }
        StreamKind::SplitSynthetic => (0..params.n_tasks)
            .map(|t| {
                let centers = draw_centers(&mut rng, c, params);
                let offset = (t * c) as u32;
                let shift = |mut s: Sample| {
                    s.label += offset;
                    s
                };
                let train = draw_split(&mut rng, &centers, params.train_per_task, params);
                let val = draw_split(&mut rng, &centers, params.val_per_task, params);
                Task {
                    id: t as u32,
                    classes: ClassRange {
                        start: offset,
                        count: c as u32,
                    },
                    train: train.into_iter().map(shift).collect(),
                    val: val.into_iter().map(shift).collect(),
                }
            })
            .collect(),
    };
    TaskStream::new(tasks, params.dim)
}

fn draw_centers(rng: &mut ChaCha8Rng, classes: usize, p: &StreamParams) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|_| {
            (0..p.dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    p.separation * z
                })
                .collect()
        })
        .collect()
}

/// Class-balanced split in shuffled order; labels are local (0-based).
fn draw_split(
    rng: &mut ChaCha8Rng,
    centers: &[Vec<f64>],
    n: usize,
    p: &StreamParams,
) -> Vec<Sample> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % centers.len()).collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .map(|c| {
            let features = centers[c]
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(rng);
                    (m + p.noise * z) as f32
                })
                .collect();
            Sample {
                features,
                label: c as u32,
            }
        })
        .collect()
}

/// Stacks features into an `n x dim` matrix and returns labels alongside.
pub fn batch_tensor<'a, T: Real>(
    samples: impl IntoIterator<Item = &'a Sample>,
    dim: usize,
) -> (Tensor<T>, Vec<usize>) {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        debug_assert_eq!(s.features.len(), dim);
        data.extend(s.features.iter().map(|&v| T::of(v as f64)));
        labels.push(s.label as usize);
    }
    let n = labels.len();
    (Tensor::from_vec(n, dim, data), labels)
}
