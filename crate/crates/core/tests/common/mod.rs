//! Helpers shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

use bmc_core::engine::{Graph, Mode, NodeId, Tensor};
use bmc_core::losses::{self, DistillKind, FisherState};
use bmc_core::model::{Architecture, Model, ModelConfig};
use bmc_core::streams::{generate_stream, StreamKind, StreamParams, TaskStream};
use bmc_core::TrainingConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

/// Loss, analytic gradients (one tensor per parameter) and ReLU sign pattern.
pub struct Eval {
    pub loss: f64,
    pub grads: Vec<Tensor<f64>>,
    pub signature: Vec<bool>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Entries whose perturbation crossed a ReLU kink.
    pub skipped: usize,
    pub max_rel: f64,
}

impl FdReport {
    pub fn merge(self, o: FdReport) -> FdReport {
        FdReport {
            checked: self.checked + o.checked,
            skipped: self.skipped + o.skipped,
            max_rel: self.max_rel.max(o.max_rel),
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Central differences of `f` over every entry of `params` against the
/// gradients in `base`, the analytic evaluation at the unperturbed point.
pub fn fd_check(params: &[Tensor<f64>], base: &Eval, f: impl Fn(&[Tensor<f64>]) -> Eval) -> FdReport {
    let mut rep = FdReport::default();
    let mut p = params.to_vec();
    for t in 0..p.len() {
        for i in 0..p[t].len() {
            let orig = p[t].data()[i];
            p[t].data_mut()[i] = orig + FD_STEP;
            let up = f(&p);
            p[t].data_mut()[i] = orig - FD_STEP;
            let down = f(&p);
            p[t].data_mut()[i] = orig;
            if up.signature != base.signature || down.signature != base.signature {
                rep.skipped += 1;
                continue;
            }
            let numeric = (up.loss - down.loss) / (2.0 * FD_STEP);
            let analytic = base.grads[t].data()[i];
            rep.checked += 1;
            rep.max_rel = rep.max_rel.max(rel_err(analytic, numeric));
        }
    }
    rep
}

fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64, shift: f64) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| shift + scale * (rng.gen::<f64>() * 2.0 - 1.0) * 1.7)
        .collect();
    Tensor::from_vec(rows, cols, data)
}

#[derive(Debug, Clone)]
pub enum Instr {
    Linear { src: usize, w: usize, b: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Norm { src: usize, gamma: usize, beta: usize },
    Dropout(usize, f64),
    Stop(usize),
    RowNorm(usize),
    RowSqNorm(usize),
}

#[derive(Debug, Clone)]
pub enum Term {
    Mean(usize),
    Sum(usize, f64),
    CrossEntropy { slot: usize, labels: Vec<usize>, weights: Option<Vec<f64>> },
}

/// A random straight-line program over slots; slot 0 is the input.
#[derive(Debug, Clone)]
pub struct Program {
    pub seed: u64,
    pub x: Tensor<f64>,
    pub params: Vec<Tensor<f64>>,
    pub instrs: Vec<Instr>,
    pub terms: Vec<Term>,
}

impl Program {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(3..=5);
        let d0 = rng.gen_range(2..=4);
        let x = normal_tensor(&mut rng, n, d0, 1.0, 0.0);
        let mut params = Vec::new();
        let mut shapes = vec![(n, d0)];
        let mut instrs = Vec::new();
        let linear = |rng: &mut ChaCha8Rng, params: &mut Vec<Tensor<f64>>, src: usize, cin: usize| {
            let out = rng.gen_range(2..=4);
            params.push(normal_tensor(rng, out, cin, 0.8, 0.0));
            params.push(normal_tensor(rng, 1, out, 0.3, 0.0));
            (Instr::Linear { src, w: params.len() - 2, b: params.len() - 1 }, (n, out))
        };
        let (i, s) = linear(&mut rng, &mut params, 0, d0);
        instrs.push(i);
        shapes.push(s);
        let steps = rng.gen_range(3..=7);
        for _ in 0..steps {
            let src = rng.gen_range(1..shapes.len());
            let shape = shapes[src];
            let same: Vec<usize> = (1..shapes.len()).filter(|&j| shapes[j] == shape).collect();
            let other = same[rng.gen_range(0..same.len())];
            let (instr, out) = match rng.gen_range(0..11) {
                0 | 1 => linear(&mut rng, &mut params, src, shape.1),
                2 => (Instr::Add(src, other), shape),
                3 => (Instr::Sub(src, other), shape),
                4 => (Instr::Mul(src, other), shape),
                5 => (Instr::Scale(src, rng.gen_range(-2.0..2.0)), shape),
                6 => (Instr::Relu(src), shape),
                7 => {
                    params.push(normal_tensor(&mut rng, 1, shape.1, 0.3, 1.0));
                    params.push(normal_tensor(&mut rng, 1, shape.1, 0.3, 0.0));
                    (
                        Instr::Norm { src, gamma: params.len() - 2, beta: params.len() - 1 },
                        shape,
                    )
                }
                8 => (Instr::Dropout(src, 0.3), shape),
                9 => (Instr::Stop(src), shape),
                _ => {
                    if rng.gen_bool(0.5) {
                        (Instr::RowNorm(src), (n, 1))
                    } else {
                        (Instr::RowSqNorm(src), (n, 1))
                    }
                }
            };
            instrs.push(instr);
            shapes.push(out);
        }
        let last = shapes.len() - 1;
        let mut terms = vec![Term::Mean(last)];
        let wide: Vec<usize> = (1..shapes.len()).filter(|&j| shapes[j].1 >= 2).collect();
        if !wide.is_empty() {
            let slot = wide[rng.gen_range(0..wide.len())];
            let c = shapes[slot].1;
            let labels = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let weights = rng
                .gen_bool(0.5)
                .then(|| (0..n).map(|_| rng.gen_range(0.1..1.0)).collect());
            terms.push(Term::CrossEntropy { slot, labels, weights });
        }
        let slot = rng.gen_range(1..shapes.len());
        terms.push(Term::Sum(slot, 0.1));
        Self { seed, x, params, instrs, terms }
    }

    /// Values reaching each stop-gradient node at `params`.
    pub fn stopped_values(&self, params: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        self.run(params, None).1
    }

    pub fn eval(&self, params: &[Tensor<f64>]) -> Eval {
        self.run(params, None).0
    }

    /// Like `eval`, but every stop-gradient node outputs the given constant,
    /// which is the function whose derivative the analytic pass computes.
    pub fn eval_frozen(&self, params: &[Tensor<f64>], frozen: &[Tensor<f64>]) -> Eval {
        self.run(params, Some(frozen)).0
    }

    fn run(&self, params: &[Tensor<f64>], frozen: Option<&[Tensor<f64>]>) -> (Eval, Vec<Tensor<f64>>) {
        let mut stopped = Vec::new();
        let mut g = Graph::<f64>::new(self.seed);
        let pids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
        let mut slots = vec![g.input(self.x.clone())];
        for instr in &self.instrs {
            let id = match *instr {
                Instr::Linear { src, w, b } => g.linear(slots[src], pids[w], pids[b]).unwrap(),
                Instr::Add(a, b) => g.add(slots[a], slots[b]).unwrap(),
                Instr::Sub(a, b) => g.sub(slots[a], slots[b]).unwrap(),
                Instr::Mul(a, b) => g.mul(slots[a], slots[b]).unwrap(),
                Instr::Scale(a, c) => g.scale(slots[a], c),
                Instr::Relu(a) => g.relu(slots[a]),
                Instr::Norm { src, gamma, beta } => {
                    let c = g.value(slots[src]).cols();
                    let (m, v) = (vec![0.0; c], vec![1.0; c]);
                    g.batch_norm(slots[src], pids[gamma], pids[beta], (&m, &v), 1e-5, Mode::Train)
                        .unwrap()
                }
                Instr::Dropout(a, p) => g.dropout(slots[a], p, Mode::Train),
                Instr::Stop(a) => {
                    stopped.push(g.value(slots[a]).clone());
                    match frozen {
                        Some(f) => g.input(f[stopped.len() - 1].clone()),
                        None => g.stop_gradient(slots[a]),
                    }
                }
                Instr::RowNorm(a) => g.row_norm(slots[a]),
                Instr::RowSqNorm(a) => g.row_sq_norm(slots[a]),
            };
            slots.push(id);
        }
        let mut loss: Option<NodeId> = None;
        for t in &self.terms {
            let term = match t {
                Term::Mean(s) => g.mean(slots[*s]),
                Term::Sum(s, c) => {
                    let s = g.sum(slots[*s]);
                    g.scale(s, *c)
                }
                Term::CrossEntropy { slot, labels, weights } => {
                    g.cross_entropy(slots[*slot], labels, weights.as_deref()).unwrap()
                }
            };
            loss = Some(match loss {
                None => term,
                Some(l) => g.add(l, term).unwrap(),
            });
        }
        let loss = loss.unwrap();
        let grads = g.backward(loss).unwrap();
        let eval = Eval {
            loss: g.value(loss).item(),
            grads: pids
                .iter()
                .zip(params)
                .map(|(&id, p)| grads.get_or_zeros(id, p.shape()))
                .collect(),
            signature: g.relu_signature(),
        };
        (eval, stopped)
    }
}

pub fn check_program(seed: u64) -> FdReport {
    let p = Program::random(seed);
    let frozen = p.stopped_values(&p.params);
    fd_check(&p.params, &p.eval(&p.params), |ps| p.eval_frozen(ps, &frozen))
}

pub fn tiny_arch() -> Architecture {
    Architecture {
        res_blocks: 2,
        res_layers_per_block: 1,
        res_dim: 4,
        hidden_dim: 3,
        dropout_p: 0.2,
    }
}

pub fn tiny_model(seed: u64) -> Model<f64> {
    let cfg = ModelConfig::new(3, 3, &tiny_arch());
    let mut m = Model::<f64>::build(&cfg, seed).unwrap();
    // Non-trivial running statistics and affine parameters.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for t in m.params_mut() {
        for v in t.data_mut() {
            *v += 0.2 * (rng.gen::<f64>() - 0.5);
        }
    }
    m
}

pub fn with_trainable(model: &Model<f64>, params: &[Tensor<f64>]) -> Model<f64> {
    let mut m = model.clone();
    for (dst, src) in m.trainable_mut().zip(params) {
        *dst = src.clone();
    }
    m
}

pub fn toy_batch(seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (normal_tensor(&mut rng, 5, 3, 1.0, 0.0), (0..5).map(|_| rng.gen_range(0..3)).collect())
}

/// The losses covered by the oracle suite, in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossCase {
    Bd,
    Exp(DistillKind),
    Bmc(DistillKind),
    Base(DistillKind),
    Ewc,
}

pub const ALL_KINDS: [DistillKind; 3] =
    [DistillKind::Features, DistillKind::KdLogits, DistillKind::PhiPenultimate];

pub fn all_loss_cases() -> Vec<LossCase> {
    let mut v = vec![LossCase::Bd, LossCase::Ewc];
    for k in ALL_KINDS {
        v.extend([LossCase::Exp(k), LossCase::Bmc(k), LossCase::Base(k)]);
    }
    v
}

/// Differentiates the loss with respect to the trainable parameters of the
/// student (expert for L_exp, base otherwise).
pub fn check_loss(case: LossCase, seed: u64) -> FdReport {
    let student = tiny_model(seed);
    let teachers: Vec<Model<f64>> = (1..=3).map(|i| tiny_model(seed * 31 + i)).collect();
    let (x, labels) = toy_batch(seed + 7);
    let mut fisher = FisherState::new(&student, 0.9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
    for (imp, anc) in fisher.importance.iter_mut().zip(fisher.anchor.iter_mut()) {
        imp.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.0..2.0));
        anc.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
    }
    let params: Vec<Tensor<f64>> = student.trainable().cloned().collect();
    let f = |ps: &[Tensor<f64>]| {
        let m = with_trainable(&student, ps);
        let mut g = Graph::<f64>::new(seed);
        let (loss, fwd) = match case {
            LossCase::Bd => {
                let fwd = m.forward_batch(&mut g, &x, Mode::Train).unwrap();
                let t = teachers[0].forward_with_taps(&x, Mode::Eval, 0).unwrap().to_nodes(&mut g);
                (losses::l_bd(&mut g, &t.taps, &fwd.taps).unwrap(), fwd)
            }
            LossCase::Exp(kind) => {
                losses::l_exp(&mut g, &m, &teachers[0], &x, &labels, 0.7, kind, Mode::Train).unwrap()
            }
            LossCase::Bmc(kind) => {
                let fwd = m.forward_batch(&mut g, &x, Mode::Train).unwrap();
                let t: Vec<_> = teachers
                    .iter()
                    .map(|e| e.forward_with_taps(&x, Mode::Eval, 0).unwrap().to_nodes(&mut g))
                    .collect();
                (losses::l_bmc(&mut g, kind, &fwd.tap_nodes(), &t).unwrap(), fwd)
            }
            LossCase::Base(kind) => losses::l_base(
                &mut g, &m, &teachers, &x, &labels, 0.8, 1.3, kind, Mode::Train,
            )
            .unwrap(),
            LossCase::Ewc => {
                let fwd = m.forward_batch(&mut g, &x, Mode::Train).unwrap();
                let pen = losses::ewc_penalty(&mut g, &fwd, &fisher).unwrap();
                let ce = losses::task_loss(&mut g, fwd.logits, &labels).unwrap();
                let pen = g.scale(pen, 0.7);
                (g.add(ce, pen).unwrap(), fwd)
            }
        };
        let grads = g.backward(loss).unwrap();
        Eval {
            loss: g.value(loss).item(),
            grads: m.gradients(&grads, &fwd),
            signature: g.relu_signature(),
        }
    };
    fd_check(&params, &f(&params), f)
}

/// The 16-task permuted stream used by the trend checks.
pub fn permuted16(seed: u64) -> TaskStream {
    let p = StreamParams {
        n_tasks: 16,
        classes_per_task: 4,
        dim: 16,
        train_per_task: 500,
        val_per_task: 100,
        separation: 3.0,
        noise: 1.0,
    };
    generate_stream(StreamKind::Permuted, &p, seed).unwrap()
}

pub fn toy_stream(kind: StreamKind, n_tasks: usize, seed: u64) -> TaskStream {
    let p = StreamParams {
        n_tasks,
        classes_per_task: 2,
        dim: 6,
        train_per_task: 40,
        val_per_task: 20,
        separation: 3.0,
        noise: 1.0,
    };
    generate_stream(kind, &p, seed).unwrap()
}

pub fn toy_training() -> TrainingConfig {
    TrainingConfig {
        lr: 0.05,
        train_epochs: 2,
        rehearsal_epochs: 3,
        batch_size: 16,
        architecture: Architecture {
            res_blocks: 1,
            res_layers_per_block: 1,
            res_dim: 8,
            hidden_dim: 6,
            dropout_p: 0.1,
        },
        ..TrainingConfig::default()
    }
}
