//! Communication and central-memory accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MB: f64 = 1e6;

/// Byte counts observed during one incremental step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCost {
    pub step: usize,
    pub experts: usize,
    /// Sync frames sent to experts.
    pub broadcast_bytes: u64,
    /// Artifact frames received from experts.
    pub upload_bytes: u64,
    /// Exemplars held centrally at the consolidation peak (memory plus buffers).
    pub exemplar_bytes: u64,
    /// Expert parameter vectors retained for consolidation.
    pub expert_param_bytes: u64,
    /// Encoded size of the base model after the step.
    pub model_bytes: u64,
}

impl StepCost {
    /// B_c: everything sent over the transport in both directions.
    pub fn communication(&self) -> u64 {
        self.broadcast_bytes + self.upload_bytes
    }

    /// M_c: everything the coordinator holds at the consolidation peak.
    pub fn central_memory(&self) -> u64 {
        self.exemplar_bytes + self.expert_param_bytes
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    steps: Vec<StepCost>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, cost: StepCost) {
        self.steps.push(cost);
    }

    pub fn steps(&self) -> &[StepCost] {
        &self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// T_c in MB: mean over steps of `M_c + B_c`, plus the final model size.
    pub fn total_cost_mb(&self) -> Result<f64> {
        let last = self
            .steps
            .last()
            .ok_or_else(|| Error::UndefinedMetric("empty cost ledger".into()))?;
        let per_step: f64 = self
            .steps
            .iter()
            .map(|s| (s.central_memory() + s.communication()) as f64)
            .sum::<f64>()
            / self.steps.len() as f64;
        let total = per_step / MB + last.model_bytes as f64 / MB;
        if total <= 0.0 {
            return Err(Error::ZeroCost);
        }
        Ok(total)
    }
}

/// A_c = mean accuracy / T_c.
pub fn cost_accuracy(mean_acc: f64, total_cost_mb: f64) -> Result<f64> {
    if total_cost_mb <= 0.0 {
        return Err(Error::ZeroCost);
    }
    Ok(mean_acc / total_cost_mb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(comm: u64, mem: u64) -> StepCost {
        StepCost {
            step: 0,
            experts: 1,
            broadcast_bytes: comm / 2,
            upload_bytes: comm - comm / 2,
            exemplar_bytes: mem,
            expert_param_bytes: 0,
            model_bytes: 500_000,
        }
    }

    #[test]
    fn total_cost_is_mean_plus_model() {
        let mut l = CostLedger::new();
        l.record(step(1_000_000, 1_000_000));
        l.record(step(3_000_000, 1_000_000));
        assert!((l.total_cost_mb().unwrap() - 3.5).abs() < 1e-12);
        assert!((cost_accuracy(0.7, 3.5).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn degenerate_ledgers_error() {
        assert!(matches!(CostLedger::new().total_cost_mb(), Err(Error::UndefinedMetric(_))));
        let mut l = CostLedger::new();
        l.record(StepCost::default());
        assert!(matches!(l.total_cost_mb(), Err(Error::ZeroCost)));
        assert!(matches!(cost_accuracy(0.5, 0.0), Err(Error::ZeroCost)));
    }
}
