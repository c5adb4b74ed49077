use serde::{Deserialize, Serialize};

use super::{batch_tensor, Sample, Task};
use crate::engine::Mode;
use crate::error::{Error, Result};
use crate::model::Model;

const EVAL_CHUNK: usize = 512;

/// Argmax over every class in the head; ties go to the lowest class id.
pub fn predict(model: &Model, samples: &[Sample]) -> Result<Vec<u32>> {
    let dim = model.config().input_dim;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let (x, _) = batch_tensor::<f32>(chunk, dim);
        let logits = model.forward_with_taps(&x, Mode::Eval, 0)?.logits;
        for r in 0..logits.rows() {
            let mut best = 0;
            for (c, &v) in logits.row(r).iter().enumerate() {
                if v > logits.row(r)[best] {
                    best = c;
                }
            }
            out.push(best as u32);
        }
    }
    Ok(out)
}

/// Class-incremental accuracy of `model` on each task's validation split.
/// Predictions range over the whole head; task identity is never used.
pub fn evaluate_cil(model: &Model, tasks: &[&Task]) -> Result<Vec<f64>> {
    let needed = tasks.iter().map(|t| t.classes.end()).max().unwrap_or(0) as usize;
    if model.num_classes() < needed {
        return Err(Error::HeadTooSmall {
            head: model.num_classes(),
            needed,
        });
    }
    tasks
        .iter()
        .map(|t| {
            let preds = predict(model, &t.val)?;
            let correct = preds
                .iter()
                .zip(&t.val)
                .filter(|(p, s)| **p == s.label)
                .count();
            Ok(correct as f64 / t.val.len() as f64)
        })
        .collect()
}

pub fn mean_accuracy(accs: &[f64]) -> f64 {
    if accs.is_empty() {
        return 0.0;
    }
    accs.iter().sum::<f64>() / accs.len() as f64
}

/// Accuracy rows after each step; row `t` holds every task seen so far, in
/// stream order, so rows never shrink.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyHistory {
    rows: Vec<Vec<f64>>,
}

impl AccuracyHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut h = Self::new();
        for r in rows {
            h.push(r)?;
        }
        Ok(h)
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if let Some(prev) = self.rows.last() {
            if row.len() < prev.len() {
                return Err(Error::UndefinedMetric(format!(
                    "history row shrank from {} to {} tasks",
                    prev.len(),
                    row.len()
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Step at which task `i` was first evaluated.
    fn learned_at(&self, task: usize) -> Option<usize> {
        self.rows.iter().position(|r| r.len() > task)
    }
}

/// Mean over tasks learned before the final step of
/// `final accuracy - accuracy right after learning`.
pub fn backward_transfer(history: &AccuracyHistory) -> Result<f64> {
    let last_step = history
        .rows
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::UndefinedMetric("empty history".into()))?;
    let last = &history.rows[last_step];
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &final_acc) in last.iter().enumerate() {
        let at = history.learned_at(i).expect("task present in last row");
        if at < last_step {
            total += final_acc - history.rows[at][i];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric(
            "backward transfer needs at least two learning steps".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Accuracy on the first task after every step.
pub fn first_task_curve(history: &AccuracyHistory) -> Vec<f64> {
    history
        .rows
        .iter()
        .filter_map(|r| r.first().copied())
        .collect()
}

/// Evaluation summary after one incremental step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub tasks_seen: usize,
    pub per_task_acc: Vec<f64>,
    pub mean_acc: f64,
    pub bwt: Option<f64>,
    pub first_task_acc: f64,
    pub wall_secs: f64,
    /// Wall-clock relative to sequential SGD on the same stream, when known.
    pub relative_time: Option<f64>,
}

impl MetricsRecord {
    pub fn from_history(step: usize, history: &AccuracyHistory, wall_secs: f64) -> Self {
        let row = history.rows.last().cloned().unwrap_or_default();
        Self {
            step,
            tasks_seen: row.len(),
            mean_acc: mean_accuracy(&row),
            bwt: backward_transfer(history).ok(),
            first_task_acc: row.first().copied().unwrap_or(0.0),
            per_task_acc: row,
            wall_secs,
            relative_time: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_accuracies_have_zero_bwt() {
        let h = AccuracyHistory::from_rows(vec![vec![0.7], vec![0.7, 0.8], vec![0.7, 0.8, 0.9]])
            .unwrap();
        assert_eq!(backward_transfer(&h).unwrap(), 0.0);
        assert_eq!(first_task_curve(&h), vec![0.7, 0.7, 0.7]);
    }

    #[test]
    fn two_task_bwt() {
        let h = AccuracyHistory::from_rows(vec![vec![0.9], vec![0.5, 0.8]]).unwrap();
        assert!((backward_transfer(&h).unwrap() - -0.4).abs() < 1e-12);
    }

    #[test]
    fn single_step_bwt_is_undefined() {
        let h = AccuracyHistory::from_rows(vec![vec![0.9]]).unwrap();
        assert!(matches!(backward_transfer(&h), Err(Error::UndefinedMetric(_))));
        // tasks learned together in one step have no earlier reference point
        let h = AccuracyHistory::from_rows(vec![vec![0.9, 0.8]]).unwrap();
        assert!(backward_transfer(&h).is_err());
    }

    #[test]
    fn multi_task_steps_use_first_evaluation() {
        let h = AccuracyHistory::from_rows(vec![vec![0.8, 0.6], vec![0.5, 0.4, 0.9, 0.9]]).unwrap();
        let expected = ((0.5 - 0.8) + (0.4 - 0.6)) / 2.0;
        assert!((backward_transfer(&h).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn shrinking_rows_are_rejected() {
        assert!(AccuracyHistory::from_rows(vec![vec![0.1, 0.2], vec![0.3]]).is_err());
    }
}
