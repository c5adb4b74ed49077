//! Training objectives.
//!
//! The graph-level functions take tap handles so callers can mix live
//! forward passes with cached teacher features (constant leaves). Teacher
//! features always pass through a stop-gradient, so a teacher's parameters
//! never receive gradient even when its forward pass lives in the same graph.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{Graph, Mode, NodeId, Real, Tensor};
use crate::error::{Error, Result};
use crate::model::{Forward, Model, TapNodes};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossCoefficients {
    /// Stability coefficient on the expert's distillation term.
    pub lambda: f64,
    /// Replay task-loss coefficient during consolidation.
    pub alpha: f64,
    /// Consolidation coefficient on the batched distillation term.
    pub beta: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which representation a distillation term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillKind {
    /// Unsquared L2 distance summed over every tap.
    #[default]
    Features,
    /// Squared L2 distance between raw logits.
    KdLogits,
    /// Unsquared L2 distance on the penultimate tap only.
    PhiPenultimate,
}

impl FromStr for DistillKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(Self::Features),
            "kd_logits" => Ok(Self::KdLogits),
            "phi_penultimate" => Ok(Self::PhiPenultimate),
            other => Err(Error::Unknown {
                what: "distillation kind",
                value: other.to_string(),
            }),
        }
    }
}

/// Mean cross-entropy over the batch. Labels are global class ids.
pub fn task_loss<T: Real>(g: &mut Graph<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    g.cross_entropy(logits, labels, None)
}

fn check_pair<T: Real>(g: &Graph<T>, teacher: NodeId, student: NodeId, what: &str) -> Result<()> {
    let (ts, ss) = (g.value(teacher).shape(), g.value(student).shape());
    if ts != ss {
        return Err(Error::TapMismatch(format!(
            "{what}: teacher {ts:?} vs student {ss:?}"
        )));
    }
    Ok(())
}

/// Batch mean of `||sg(teacher) - student||_2`.
fn feature_distance<T: Real>(g: &mut Graph<T>, teacher: NodeId, student: NodeId) -> Result<NodeId> {
    let t = g.stop_gradient(teacher);
    let d = g.sub(t, student)?;
    let n = g.row_norm(d);
    Ok(g.mean(n))
}

fn sum_nodes<T: Real>(g: &mut Graph<T>, nodes: &[NodeId]) -> Result<NodeId> {
    let (&first, rest) = nodes
        .split_first()
        .ok_or_else(|| Error::TapMismatch("no terms to sum".into()))?;
    rest.iter().try_fold(first, |acc, &n| g.add(acc, n))
}

/// Pairwise feature distillation: sum over aligned taps of the batch-mean
/// unsquared L2 distance, with the teacher behind a stop-gradient.
pub fn l_bd<T: Real>(g: &mut Graph<T>, teacher: &[NodeId], student: &[NodeId]) -> Result<NodeId> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::TapMismatch(format!(
            "teacher has {} taps, student has {}",
            teacher.len(),
            student.len()
        )));
    }
    let mut terms = Vec::with_capacity(teacher.len());
    for (i, (&t, &s)) in teacher.iter().zip(student).enumerate() {
        check_pair(g, t, s, &format!("tap {i}"))?;
        terms.push(feature_distance(g, t, s)?);
    }
    sum_nodes(g, &terms)
}

/// Distillation term of the requested kind between one teacher and the student.
pub fn distill<T: Real>(
    g: &mut Graph<T>,
    kind: DistillKind,
    teacher: &TapNodes,
    student: &TapNodes,
) -> Result<NodeId> {
    match kind {
        DistillKind::Features => l_bd(g, &teacher.taps, &student.taps),
        DistillKind::PhiPenultimate => {
            let (t, s) = match (teacher.taps.last(), student.taps.last()) {
                (Some(&t), Some(&s)) if teacher.taps.len() == student.taps.len() => (t, s),
                _ => return Err(Error::TapMismatch("penultimate tap missing".into())),
            };
            l_bd(g, &[t], &[s])
        }
        DistillKind::KdLogits => {
            check_pair(g, teacher.logits, student.logits, "logits")?;
            let t = g.stop_gradient(teacher.logits);
            let d = g.sub(t, student.logits)?;
            let sq = g.row_sq_norm(d);
            Ok(g.mean(sq))
        }
    }
}

/// Batched consolidation term: sum of per-expert distillation terms, in
/// expert-index order.
pub fn l_bmc<T: Real>(
    g: &mut Graph<T>,
    kind: DistillKind,
    student: &TapNodes,
    experts: &[TapNodes],
) -> Result<NodeId> {
    if experts.is_empty() {
        return Err(Error::NoExperts);
    }
    let terms = experts
        .iter()
        .map(|e| distill(g, kind, e, student))
        .collect::<Result<Vec<_>>>()?;
    sum_nodes(g, &terms)
}

/// `task + lambda * distill(base -> expert)` on one batch.
pub fn l_exp_nodes<T: Real>(
    g: &mut Graph<T>,
    kind: DistillKind,
    expert: &TapNodes,
    base: &TapNodes,
    labels: &[usize],
    lambda: f64,
) -> Result<NodeId> {
    let task = task_loss(g, expert.logits, labels)?;
    let stab = distill(g, kind, base, expert)?;
    let stab = g.scale(stab, lambda);
    g.add(task, stab)
}

/// `alpha * task + beta * l_bmc` on one batch.
pub fn l_base_nodes<T: Real>(
    g: &mut Graph<T>,
    kind: DistillKind,
    student: &TapNodes,
    experts: &[TapNodes],
    labels: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<NodeId> {
    let task = task_loss(g, student.logits, labels)?;
    let task = g.scale(task, alpha);
    let bmc = l_bmc(g, kind, student, experts)?;
    let bmc = g.scale(bmc, beta);
    g.add(task, bmc)
}

fn check_architecture<T: Real>(a: &Model<T>, b: &Model<T>) -> Result<()> {
    if a.layout() != b.layout() || a.config() != b.config() {
        return Err(Error::Layout("models do not share an architecture".into()));
    }
    Ok(())
}

/// Expert objective on a batch. The base is a frozen teacher run in the
/// same `mode` as the expert; in train mode it uses the batch statistics and
/// replays the dropout masks the expert draws from `g`, so the stability
/// term is exactly zero while the expert still equals the base. `g` must
/// not have drawn any dropout masks before this call.
#[allow(clippy::too_many_arguments)]
pub fn l_exp<T: Real>(
    g: &mut Graph<T>,
    expert: &Model<T>,
    base: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
    kind: DistillKind,
    mode: Mode,
) -> Result<(NodeId, Forward)> {
    check_architecture(expert, base)?;
    if g.masks_drawn() != 0 {
        return Err(Error::Config(
            "l_exp needs a graph that has not drawn dropout masks".into(),
        ));
    }
    let teacher = base.forward_with_taps(x, mode, g.seed())?.to_nodes(g);
    let student = expert.forward_batch(g, x, mode)?;
    let loss = l_exp_nodes(g, kind, &student.tap_nodes(), &teacher, labels, lambda)?;
    Ok((loss, student))
}

/// Base objective on a batch drawn from the consolidation pool. Every
/// expert is a frozen teacher run like the base in [`l_exp`]: same mode,
/// batch statistics in train mode and the base's dropout masks. `g` must
/// not have drawn any dropout masks before this call.
#[allow(clippy::too_many_arguments)]
pub fn l_base<T: Real>(
    g: &mut Graph<T>,
    base: &Model<T>,
    experts: &[Model<T>],
    x: &Tensor<T>,
    labels: &[usize],
    alpha: f64,
    beta: f64,
    kind: DistillKind,
    mode: Mode,
) -> Result<(NodeId, Forward)> {
    if experts.is_empty() {
        return Err(Error::NoExperts);
    }
    if g.masks_drawn() != 0 {
        return Err(Error::Config(
            "l_base needs a graph that has not drawn dropout masks".into(),
        ));
    }
    let mut teachers = Vec::with_capacity(experts.len());
    for e in experts {
        check_architecture(e, base)?;
        teachers.push(e.forward_with_taps(x, mode, g.seed())?.to_nodes(g));
    }
    let student = base.forward_batch(g, x, mode)?;
    let loss = l_base_nodes(
        g,
        kind,
        &student.tap_nodes(),
        &teachers,
        labels,
        alpha,
        beta,
    )?;
    Ok((loss, student))
}

/// Diagonal Fisher importances and anchor parameters for online EWC.
/// Both vectors follow the model's trainable-entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherState<T = f32> {
    pub importance: Vec<Tensor<T>>,
    pub anchor: Vec<Tensor<T>>,
    pub gamma: f64,
}

impl<T: Real> FisherState<T> {
    /// Zero importance anchored at the model's current parameters.
    pub fn new(model: &Model<T>, gamma: f64) -> Self {
        Self {
            importance: model
                .trainable_shapes()
                .into_iter()
                .map(|(r, c)| Tensor::zeros(r, c))
                .collect(),
            anchor: model.trainable().cloned().collect(),
            gamma,
        }
    }

    /// Follows head growth: new outputs get zero importance and are anchored
    /// at the model's current values. Every other entry must be unchanged.
    pub fn grow_to(&self, model: &Model<T>) -> Result<Self> {
        let shapes = model.trainable_shapes();
        if shapes.len() != self.importance.len() {
            return Err(Error::Layout("fisher state does not match the model".into()));
        }
        let mut importance = Vec::with_capacity(shapes.len());
        let mut anchor = Vec::with_capacity(shapes.len());
        for ((&(r, c), (f, a)), p) in shapes
            .iter()
            .zip(self.importance.iter().zip(&self.anchor))
            .zip(model.trainable())
        {
            if (r, c) == f.shape() {
                importance.push(f.clone());
                anchor.push(a.clone());
                continue;
            }
            // Head rows (or bias columns) appended at the end of row-major data.
            let rows_grow = c == f.cols() && r > f.rows();
            let bias_grows = r == 1 && f.rows() == 1 && c > f.cols();
            if !(rows_grow || bias_grows) {
                return Err(Error::Layout(format!(
                    "entry {:?} cannot grow to {:?}",
                    f.shape(),
                    (r, c)
                )));
            }
            let mut fd = f.data().to_vec();
            fd.resize(r * c, T::zero());
            let mut ad = a.data().to_vec();
            ad.extend_from_slice(&p.data()[a.len()..]);
            importance.push(Tensor::from_vec(r, c, fd));
            anchor.push(Tensor::from_vec(r, c, ad));
        }
        Ok(Self {
            importance,
            anchor,
            gamma: self.gamma,
        })
    }

    fn check(&self, shapes: &[(usize, usize)]) -> Result<()> {
        let ok = self.importance.len() == shapes.len()
            && self.anchor.len() == shapes.len()
            && shapes
                .iter()
                .zip(self.importance.iter().zip(&self.anchor))
                .all(|(&s, (f, a))| f.shape() == s && a.shape() == s);
        if ok {
            Ok(())
        } else {
            Err(Error::Layout("fisher state does not match the model".into()))
        }
    }
}

/// `sum_p F_p (p - anchor_p)^2` over the trainable parameter nodes of `fwd`.
pub fn ewc_penalty<T: Real>(
    g: &mut Graph<T>,
    fwd: &Forward,
    fisher: &FisherState<T>,
) -> Result<NodeId> {
    let nodes = fwd.trainable_nodes();
    let shapes: Vec<_> = nodes.iter().map(|&n| g.value(n).shape()).collect();
    fisher.check(&shapes)?;
    let mut terms = Vec::with_capacity(nodes.len());
    for ((&p, f), a) in nodes.iter().zip(&fisher.importance).zip(&fisher.anchor) {
        let a = g.input(a.clone());
        let f = g.input(f.clone());
        let d = g.sub(p, a)?;
        let sq = g.mul(d, d)?;
        let w = g.mul(sq, f)?;
        terms.push(g.sum(w));
    }
    sum_nodes(g, &terms)
}

/// Trainable-parameter gradients of the task loss for one example, with the
/// model in eval mode.
pub fn example_gradient<T: Real>(
    model: &Model<T>,
    features: &Tensor<T>,
    label: usize,
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new(0);
    let f = model.forward_batch(&mut g, features, Mode::Eval)?;
    let loss = task_loss(&mut g, f.logits, &[label])?;
    let grads = g.backward(loss)?;
    Ok(model.gradients(&grads, &f))
}

/// Empirical Fisher diagonal from `x` (one example per row): the mean of
/// squared per-example task-loss gradients, added to the decayed previous
/// importance, then re-anchored at the model's current parameters.
pub fn update_fisher<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    fisher: &FisherState<T>,
) -> Result<FisherState<T>> {
    fisher.check(&model.trainable_shapes())?;
    let mut fresh: Vec<Tensor<T>> = model
        .trainable_shapes()
        .into_iter()
        .map(|(r, c)| Tensor::zeros(r, c))
        .collect();
    let n = labels.len();
    for (i, &y) in labels.iter().enumerate() {
        let row = x.select_rows(&[i]);
        for (acc, gr) in fresh.iter_mut().zip(example_gradient(model, &row, y)?) {
            acc.add_assign(&gr.map(|v| v * v));
        }
    }
    let inv_n = if n > 0 {
        T::one() / T::from_usize(n).unwrap()
    } else {
        T::zero()
    };
    let gamma = T::of(fisher.gamma);
    let importance = fisher
        .importance
        .iter()
        .zip(fresh)
        .map(|(old, new)| old.zip_map(&new, |o, f| gamma * o + f * inv_n))
        .collect();
    Ok(FisherState {
        importance,
        anchor: model.trainable().cloned().collect(),
        gamma: fisher.gamma,
    })
}
