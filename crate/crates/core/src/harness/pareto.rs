use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub total_cost_mb: f64,
    pub mean_acc: f64,
    /// Where the point came from (e.g. a records file).
    pub label: String,
}

/// Points for which no other point has both a strictly lower cost and a
/// strictly higher accuracy, sorted by cost then accuracy. Points with the
/// same coordinates are reported once (the first label wins).
pub fn export_pareto(points: &[ParetoPoint]) -> Result<Vec<ParetoPoint>> {
    if points.is_empty() {
        return Err(Error::UndefinedMetric("no points to filter".into()));
    }
    if let Some(p) = points
        .iter()
        .find(|p| !p.total_cost_mb.is_finite() || !p.mean_acc.is_finite())
    {
        return Err(Error::UndefinedMetric(format!(
            "non-finite point from {}",
            p.label
        )));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&points[a], &points[b]);
        p.total_cost_mb
            .total_cmp(&q.total_cost_mb)
            .then(p.mean_acc.total_cmp(&q.mean_acc))
            .then(a.cmp(&b))
    });
    let mut front: Vec<ParetoPoint> = Vec::new();
    // Best accuracy among points with strictly lower cost than the current group.
    let mut best_cheaper = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let cost = points[order[i]].total_cost_mb;
        let mut j = i;
        let mut group_best = f64::NEG_INFINITY;
        while j < order.len() && points[order[j]].total_cost_mb == cost {
            let p = &points[order[j]];
            group_best = group_best.max(p.mean_acc);
            let duplicate = front
                .last()
                .is_some_and(|l| l.total_cost_mb == cost && l.mean_acc == p.mean_acc);
            if p.mean_acc >= best_cheaper && !duplicate {
                front.push(p.clone());
            }
            j += 1;
        }
        best_cheaper = best_cheaper.max(group_best);
        i = j;
    }
    Ok(front)
}
