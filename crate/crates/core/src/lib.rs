//! Batch model consolidation for continual learning.
//!
//! Experts train in parallel on disjoint tasks under a feature-level
//! stability loss, ship one artifact each (parameters plus a replay
//! buffer), and a coordinator distills all of them into a single base
//! model at once on pooled replay data.

pub mod baselines;
pub(crate) mod codec;
pub mod engine;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod protocol;
pub mod replay;
pub mod seeds;
pub mod streams;
pub mod training;

pub use error::{Error, Result};
pub use harness::{ExperimentConfig, Method, SweepSpec};
pub use losses::{DistillKind, LossCoefficients};
pub use model::{Architecture, Model, ModelConfig, ParamVector};
pub use protocol::{BmcConfig, CostLedger, RunReport, RunSummary, StepCost};
pub use replay::{Buffer, Exemplar, Memory, SamplingStrategy};
pub use streams::{Sample, Task, TaskStream};
pub use training::TrainingConfig;
