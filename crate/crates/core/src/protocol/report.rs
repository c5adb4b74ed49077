use serde::{Deserialize, Serialize};

use super::ledger::{cost_accuracy, CostLedger, StepCost};
use crate::model::Model;
use crate::streams::{backward_transfer, first_task_curve, mean_accuracy, AccuracyHistory, MetricsRecord};

/// One line of a run's record stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    #[serde(flatten)]
    pub metrics: MetricsRecord,
    pub cost: Option<StepCost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFailure {
    pub step: usize,
    pub error: String,
}

/// Outcome of a full pass over a stream by any method.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub method: String,
    pub records: Vec<StepRecord>,
    pub history: AccuracyHistory,
    /// Present for methods that communicate (BMC) or keep a memory (ER).
    pub ledger: Option<CostLedger>,
    pub wall_secs: f64,
    pub failure: Option<StepFailure>,
    /// Absent for methods that do not end with a single model.
    pub final_model: Option<Model>,
}

/// Deterministic end-of-run summary; wall-clock is deliberately excluded so
/// that repeated serial runs produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub steps: usize,
    pub tasks_seen: usize,
    pub mean_acc: f64,
    pub final_accuracies: Vec<f64>,
    pub bwt: Option<f64>,
    pub first_task_curve: Vec<f64>,
    pub total_cost_mb: Option<f64>,
    pub cost_accuracy: Option<f64>,
    pub failure: Option<StepFailure>,
}

impl RunReport {
    pub fn mean_accuracy(&self) -> f64 {
        self.history.rows().last().map_or(0.0, |r| mean_accuracy(r))
    }

    pub fn summary(&self) -> RunSummary {
        let last = self.history.rows().last().cloned().unwrap_or_default();
        let total_cost_mb = self.ledger.as_ref().and_then(|l| l.total_cost_mb().ok());
        let mean_acc = mean_accuracy(&last);
        RunSummary {
            method: self.method.clone(),
            steps: self.records.len(),
            tasks_seen: last.len(),
            mean_acc,
            bwt: backward_transfer(&self.history).ok(),
            first_task_curve: first_task_curve(&self.history),
            total_cost_mb,
            cost_accuracy: total_cost_mb.and_then(|t| cost_accuracy(mean_acc, t).ok()),
            final_accuracies: last,
            failure: self.failure.clone(),
        }
    }
}
