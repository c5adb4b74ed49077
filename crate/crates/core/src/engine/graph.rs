//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every node holds its forward value as soon as it is created. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and [`Graph::backward`] is a single reverse sweep. Gradients only
//! flow through nodes that transitively depend on a parameter leaf and are
//! not shielded by [`Graph::stop_gradient`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
    },
    NormAffine {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: NodeId,
        mask: Tensor<T>,
    },
    StopGrad,
    RowNorm(NodeId),
    RowSqNorm(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        probs: Tensor<T>,
        labels: Vec<usize>,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `id`, or `None` when no
    /// gradient reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but materializes exact zeros for unreached nodes.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    rng: ChaCha8Rng,
    seed: u64,
    masks_drawn: usize,
}

impl<T: Real> Graph<T> {
    /// `seed` drives dropout masks; identical seeds give identical masks.
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            masks_drawn: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Dropout masks drawn so far. A fresh graph with the same seed replays
    /// the same masks in the same order.
    pub fn masks_drawn(&self) -> usize {
        self.masks_drawn
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.next_id(),
            op,
            detail,
        }
    }

    /// Constant leaf (inputs, frozen teacher features, fixed coefficients).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Learnable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Param, value, true)
    }

    /// `x W^T + b` for `x: n x in`, `W: out x in`, `b: 1 x out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs.1 != ws.1 || bs != (1, ws.0) {
            return Err(self.shape_err(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let mut out = Tensor::zeros(xs.0, ws.0);
        for r in 0..xs.0 {
            out.row_mut(r).copy_from_slice(self.value(b).data());
        }
        gemm(
            T::one(),
            self.value(x),
            false,
            self.value(w),
            true,
            T::one(),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Linear { x, w, b }, out, rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(self.shape_err(name, format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.value(a).zip_map(self.value(b), f))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let c = T::of(c);
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), v, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(Op::Relu(a), v, rg)
    }

    /// Batch normalization over the row (batch) axis.
    ///
    /// In train mode the batch statistics are used and kept on the node (see
    /// [`batch_stats`](Self::batch_stats)); in eval mode `running` supplies
    /// mean and variance and the op is a fixed affine map of `x`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: (&[T], &[T]),
        eps: f64,
        mode: Mode,
    ) -> Result<NodeId> {
        let (n, c) = self.value(x).shape();
        let (gs, bs) = (self.value(gamma).shape(), self.value(beta).shape());
        if gs != (1, c) || bs != (1, c) || running.0.len() != c || running.1.len() != c {
            return Err(self.shape_err(
                "batch_norm",
                format!("input {:?}, gamma {gs:?}, beta {bs:?}", (n, c)),
            ));
        }
        if n == 0 {
            return Err(self.shape_err("batch_norm", "empty batch".into()));
        }
        let eps = T::of(eps);
        let xv = self.value(x);
        let (mean, var) = match mode {
            Mode::Train => {
                let nf = T::from_usize(n).unwrap();
                let mut mean = vec![T::zero(); c];
                for r in 0..n {
                    for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                        *m = *m + v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / nf);
                let mut var = vec![T::zero(); c];
                for r in 0..n {
                    for ((s, &v), &m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                        let d = v - m;
                        *s = *s + d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / nf);
                (mean, var)
            }
            Mode::Eval => (running.0.to_vec(), running.1.to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(n, c);
        for r in 0..n {
            let src = xv.row(r);
            for (j, o) in xhat.row_mut(r).iter_mut().enumerate() {
                *o = (src[j] - mean[j]) * inv_std[j];
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Tensor::zeros(n, c);
        for r in 0..n {
            let h = xhat.row(r);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = g[j] * h[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = match mode {
            Mode::Train => Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mean,
                var,
            },
            Mode::Eval => Op::NormAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        };
        Ok(self.push(op, out, rg))
    }

    /// Biased batch mean and variance recorded by a train-mode batch norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64, mode: Mode) -> NodeId {
        if mode == Mode::Eval || p <= 0.0 {
            return x;
        }
        let (n, c) = self.value(x).shape();
        let keep = T::of(1.0 / (1.0 - p));
        self.masks_drawn += 1;
        let mut mask = Tensor::zeros(n, c);
        for m in mask.data_mut() {
            if self.rng.gen::<f64>() >= p {
                *m = keep;
            }
        }
        let v = self.value(x).zip_map(&mask, |a, m| a * m);
        let rg = self.rg(x);
        self.push(Op::Dropout { x, mask }, v, rg)
    }

    /// Forwards the value unchanged and blocks all gradient flow.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(Op::StopGrad, v, false)
    }

    /// Per-row Euclidean norm, `n x 1`. The gradient at a zero row is zero.
    pub fn row_norm(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data = (0..av.rows())
            .map(|r| av.row(r).iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let v = Tensor::from_vec(av.rows(), 1, data);
        let rg = self.rg(a);
        self.push(Op::RowNorm(a), v, rg)
    }

    /// Per-row squared Euclidean norm, `n x 1`.
    pub fn row_sq_norm(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data = (0..av.rows())
            .map(|r| av.row(r).iter().map(|&v| v * v).sum::<T>())
            .collect();
        let v = Tensor::from_vec(av.rows(), 1, data);
        let rg = self.rg(a);
        self.push(Op::RowSqNorm(a), v, rg)
    }

    /// Mean over all elements, `1 x 1`.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let n = T::from_usize(av.len().max(1)).unwrap();
        let v = Tensor::scalar(av.sum() / n);
        let rg = self.rg(a);
        self.push(Op::Mean(a), v, rg)
    }

    /// Sum over all elements, `1 x 1`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), v, rg)
    }

    /// Softmax cross-entropy `sum_i w_i * -log softmax(z_i)[y_i]`, `1 x 1`.
    /// Without explicit weights every row gets `1/n` (the batch mean).
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        weights: Option<&[T]>,
    ) -> Result<NodeId> {
        let (n, c) = self.value(logits).shape();
        if labels.len() != n {
            return Err(self.shape_err(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let weights = match weights {
            Some(w) if w.len() != n => {
                return Err(self.shape_err(
                    "cross_entropy",
                    format!("{} weights for {n} rows", w.len()),
                ))
            }
            Some(w) => w.to_vec(),
            None => vec![T::one() / T::from_usize(n.max(1)).unwrap(); n],
        };
        let z = self.value(logits);
        let mut probs = Tensor::zeros(n, c);
        let mut loss = T::zero();
        for r in 0..n {
            let row = z.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - max).exp();
                denom = denom + *p;
            }
            probs.row_mut(r).iter_mut().for_each(|p| *p = *p / denom);
            let log_p = row[labels[r]] - max - denom.ln();
            loss = loss - weights[r] * log_p;
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                weights,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Sign pattern of every ReLU input. Finite-difference checks compare
    /// patterns at perturbed points to detect crossings of the kink.
    pub fn relu_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                sig.extend(self.value(a).data().iter().map(|&v| v > T::zero()));
            }
        }
        sig
    }

    /// Loss value plus the gradient of every node with respect to it.
    pub fn evaluate_with_grad(&self, loss: NodeId) -> Result<(T, Gradients<T>)> {
        let grads = self.backward(loss)?;
        Ok((self.value(loss).item(), grads))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape {
                node: loss.0,
                op: "backward",
                detail: format!("loss must be 1x1, got {:?}", lv.shape()),
            });
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite { node: loss.0 });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |id: NodeId, t: Tensor<T>| {
            if !self.rg(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param | Op::StopGrad => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    gemm(T::one(), g, false, wv, false, T::zero(), &mut dx);
                    acc(*x, dx);
                }
                if self.rg(*w) {
                    let mut dw = Tensor::zeros(wv.rows(), wv.cols());
                    gemm(T::one(), g, true, xv, false, T::zero(), &mut dw);
                    acc(*w, dw);
                }
                if self.rg(*b) {
                    acc(*b, col_sums(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(bv, |gi, bi| gi * bi));
                acc(*b, g.zip_map(av, |gi, ai| gi * ai));
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * *c)),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(
                    *a,
                    g.zip_map(av, |gi, ai| if ai > T::zero() { gi } else { T::zero() }),
                );
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let (n, c) = g.shape();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for r in 0..n {
                    for j in 0..c {
                        dgamma[j] = dgamma[j] + g.get(r, j) * xhat.get(r, j);
                        dbeta[j] = dbeta[j] + g.get(r, j);
                    }
                }
                if self.rg(*x) {
                    // dx = inv_std/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat)),
                    // with dxhat = g*gamma, so both sums reduce to dbeta/dgamma.
                    let nf = T::from_usize(n).unwrap();
                    let mut dx = Tensor::zeros(n, c);
                    for r in 0..n {
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            let dxhat = g.get(r, j) * gam[j];
                            *o = inv_std[j] / nf
                                * (nf * dxhat
                                    - dbeta[j] * gam[j]
                                    - xhat.get(r, j) * dgamma[j] * gam[j]);
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, Tensor::row_vector(dgamma));
                acc(*beta, Tensor::row_vector(dbeta));
            }
            Op::NormAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = g.shape();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = Tensor::zeros(n, c);
                for r in 0..n {
                    for j in 0..c {
                        let gi = g.get(r, j);
                        dgamma[j] = dgamma[j] + gi * xhat.get(r, j);
                        dbeta[j] = dbeta[j] + gi;
                        dx.row_mut(r)[j] = gi * gam[j] * inv_std[j];
                    }
                }
                acc(*x, dx);
                acc(*gamma, Tensor::row_vector(dgamma));
                acc(*beta, Tensor::row_vector(dbeta));
            }
            Op::Dropout { x, mask } => acc(*x, g.zip_map(mask, |gi, m| gi * m)),
            Op::RowNorm(a) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let norm = node.value.get(r, 0);
                    if norm > T::zero() {
                        let s = g.get(r, 0) / norm;
                        for (o, &v) in da.row_mut(r).iter_mut().zip(av.row(r)) {
                            *o = s * v;
                        }
                    }
                }
                acc(*a, da);
            }
            Op::RowSqNorm(a) => {
                let av = self.value(*a);
                let two = T::of(2.0);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let s = two * g.get(r, 0);
                    for (o, &v) in da.row_mut(r).iter_mut().zip(av.row(r)) {
                        *o = s * v;
                    }
                }
                acc(*a, da);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let n = T::from_usize(av.len().max(1)).unwrap();
                acc(*a, Tensor::filled(av.rows(), av.cols(), g.item() / n));
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                acc(*a, Tensor::filled(av.rows(), av.cols(), g.item()));
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                weights,
            } => {
                let up = g.item();
                let mut d = probs.clone();
                for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                    let row = d.row_mut(r);
                    row[y] = row[y] - T::one();
                    let s = w * up;
                    row.iter_mut().for_each(|v| *v = *v * s);
                }
                acc(*logits, d);
            }
        }
    }
}

fn col_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); g.cols()];
    for r in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row(r)) {
            *o = *o + v;
        }
    }
    Tensor::row_vector(out)
}
