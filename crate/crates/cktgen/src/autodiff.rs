//! Reverse-mode automatic differentiation over `f64` ndarray tensors.
//!
//! A [`Graph`] is a tape: every operation appends one entry holding the
//! forward value and enough information to push gradients to its parents.
//! Graphs are rebuilt per step, parameters live in a [`ParamStore`] keyed
//! by name, and [`Graph::backward`] returns named gradients. Everything is
//! double precision and single threaded, which keeps runs bit-for-bit
//! reproducible and lets tests check gradients against central differences.

use indexmap::IndexMap;
use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn, Slice, Zip};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

/// Handle to one tape entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Relu(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Reshape(usize),
    Transpose(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    GatherRows(usize, Arc<Vec<usize>>),
    GatherDiag(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Dropout(usize, Arc<ArrayD<f64>>),
    CrossEntropy {
        logits: usize,
        targets: Arc<Vec<usize>>,
        weights: Arc<Vec<f64>>,
    },
    BceWithLogits {
        logits: usize,
        targets: Arc<ArrayD<f64>>,
        weights: Arc<ArrayD<f64>>,
    },
    MseMasked {
        pred: usize,
        target: Arc<ArrayD<f64>>,
        mask: Arc<ArrayD<f64>>,
    },
    SmoothL1(usize, usize),
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for k in 0..ndim {
        let da = if k < ndim - a.len() { 1 } else { a[k - (ndim - a.len())] };
        let db = if k < ndim - b.len() { 1 } else { b[k - (ndim - b.len())] };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

fn binary_broadcast(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("lhs broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("rhs broadcast");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

/// Sums a gradient back down to `target` shape, undoing broadcasting.
fn reduce_to_shape(mut g: ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn matmul2(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs 2d");
    let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs 2d");
    assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dims");
    a2.dot(&b2).into_dyn()
}

fn bmm(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    assert_eq!(a.ndim(), 3, "bmm lhs 3d");
    assert_eq!(b.ndim(), 3, "bmm rhs 3d");
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bs2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    assert_eq!(bs, bs2, "bmm batch dims");
    assert_eq!(k, k2, "bmm inner dims");
    let mut out = ArrayD::zeros(IxDyn(&[bs, m, n]));
    for i in 0..bs {
        let ai = a.index_axis(Axis(0), i);
        let bi = b.index_axis(Axis(0), i);
        let a2 = ai.into_dimensionality::<Ix2>().unwrap();
        let b2 = bi.into_dimensionality::<Ix2>().unwrap();
        out.index_axis_mut(Axis(0), i).assign(&a2.dot(&b2).into_dyn());
    }
    out
}

/// Softmax over the last axis; rows whose entries are all `-inf` map to
/// zeros instead of NaN so fully masked rows stay inert.
fn softmax_last(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut y = x.clone();
    let last = Axis(y.ndim() - 1);
    for mut lane in y.lanes_mut(last) {
        let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            lane.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for v in lane.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v /= sum;
        }
    }
    y
}

fn log_softmax_last(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut y = x.clone();
    let last = Axis(y.ndim() - 1);
    for mut lane in y.lanes_mut(last) {
        let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            lane.fill(f64::NEG_INFINITY);
            continue;
        }
        let lse = max + lane.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in lane.iter_mut() {
            *v -= lse;
        }
    }
    y
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Named parameter tensors with a stable iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "parameter {name} registered twice"
        );
    }

    /// Xavier-uniform matrix, the default for dense layers.
    pub fn insert_dense(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| rng.gen_range(-limit..limit));
        self.insert(name, w);
    }

    /// Normal(0, scale) tensor, used for embedding tables.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) {
        let w = ArrayD::from_shape_fn(IxDyn(shape), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        });
        self.insert(name, w);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    pub fn insert_ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, ArrayD::ones(IxDyn(shape)));
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }
}

/// Named gradients produced by one backward pass.
pub type GradMap = IndexMap<String, ArrayD<f64>>;

/// One forward tape. Rebuilt for every training or inference step.
pub struct Graph {
    values: Vec<ArrayD<f64>>,
    ops: Vec<Op>,
    params: IndexMap<String, usize>,
    train: bool,
    dropout_rng: ChaCha8Rng,
}

impl Graph {
    /// `train` enables dropout; `dropout_seed` fixes its masks so a step
    /// can be replayed exactly.
    pub fn new(train: bool, dropout_seed: u64) -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            params: IndexMap::new(),
            train,
            dropout_rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "expected scalar, got shape {:?}", val.shape());
        *val.iter().next().unwrap()
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Registers a parameter leaf, memoized by name so repeated uses share
    /// one entry and gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&id) = self.params.get(name) {
            return Var(id);
        }
        let v = self.leaf(store.get(name).clone());
        self.params.insert(name.to_string(), v.0);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = binary_broadcast(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = binary_broadcast(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = binary_broadcast(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x + c);
        self.push(v, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x * c);
        self.push(v, Op::MulScalar(a.0, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::ln);
        self.push(v, Op::Ln(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul2(&self.values[a.0], &self.values[b.0]);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let v = bmm(&self.values[a.0], &self.values[b.0]);
        self.push(v, Op::BatchMatMul(a.0, b.0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.values[a.0]
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| {
                panic!(
                    "cannot reshape {:?} to {shape:?}",
                    self.values[a.0].shape()
                )
            });
        self.push(v, Op::Reshape(a.0))
    }

    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Var {
        let v = self.values[a.0]
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        self.push(v, Op::Transpose(a.0, perm.to_vec()))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shapes");
        self.push(v, Op::Concat(parts.iter().map(|p| p.0).collect(), axis))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.values[a.0]
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(
            v,
            Op::Slice {
                x: a.0,
                axis,
                start,
                len,
            },
        )
    }

    /// Row selection on a 2-d tensor; duplicate indices accumulate in the
    /// backward scatter, which is what embedding lookup needs.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let x = &self.values[a.0];
        assert_eq!(x.ndim(), 2, "gather_rows input must be 2d");
        let rows = x.shape()[0];
        assert!(
            indices.iter().all(|&i| i < rows),
            "gather index out of range"
        );
        let v = x
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .select(Axis(0), indices)
            .into_dyn();
        self.push(v, Op::GatherRows(a.0, Arc::new(indices.to_vec())))
    }

    pub fn gather_diag(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        assert_eq!(x.ndim(), 2);
        assert_eq!(x.shape()[0], x.shape()[1], "diag needs a square matrix");
        let n = x.shape()[0];
        let v = ArrayD::from_shape_fn(IxDyn(&[n]), |ix| x[[ix[0], ix[0]]]);
        self.push(v, Op::GatherDiag(a.0))
    }

    /// Softmax over the last axis. Masking is done by adding `-inf` before
    /// the call; fully masked rows become all-zero.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_last(&self.values[a.0]);
        self.push(v, Op::Softmax(a.0))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax_last(&self.values[a.0]);
        self.push(v, Op::LogSoftmax(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.values[a.0].sum());
        self.push(v, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len().max(1) as f64;
        let v = ArrayD::from_elem(IxDyn(&[]), self.values[a.0].sum() / n);
        self.push(v, Op::Mean(a.0))
    }

    /// Normalizes the last axis to zero mean and unit variance, then
    /// applies the affine pair.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = &self.values[x.0];
        let d = *xv.shape().last().expect("layer_norm input rank");
        assert_eq!(self.values[gamma.0].shape(), [d]);
        assert_eq!(self.values[beta.0].shape(), [d]);
        let gv = &self.values[gamma.0];
        let bv = &self.values[beta.0];
        let mut out = xv.clone();
        for mut lane in out.lanes_mut(Axis(xv.ndim() - 1)) {
            let mean = lane.sum() / d as f64;
            let var = lane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (k, v) in lane.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gv[[k]] + bv[[k]];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    /// Inverted dropout; identity in eval mode or when `p` is zero.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return a;
        }
        assert!(p < 1.0, "dropout probability must be below 1");
        let keep = 1.0 - p;
        let shape = self.values[a.0].shape().to_vec();
        let rng = &mut self.dropout_rng;
        let mask = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let v = &self.values[a.0] * &mask;
        self.push(v, Op::Dropout(a.0, Arc::new(mask)))
    }

    /// Weighted-mean cross entropy from logits. Row weights of zero drop
    /// rows; the divisor is the weight sum.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let x = &self.values[logits.0];
        assert_eq!(x.ndim(), 2, "cross_entropy logits must be 2d");
        let (r, c) = (x.shape()[0], x.shape()[1]);
        assert_eq!(targets.len(), r);
        assert_eq!(weights.len(), r);
        assert!(targets.iter().all(|&t| t < c), "target out of range");
        let wsum: f64 = weights.iter().sum();
        let mut loss = 0.0;
        if wsum > 0.0 {
            let logp = log_softmax_last(x);
            for row in 0..r {
                loss -= weights[row] * logp[[row, targets[row]]];
            }
            loss /= wsum;
        }
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: Arc::new(targets.to_vec()),
                weights: Arc::new(weights.to_vec()),
            },
        )
    }

    /// Weighted-mean binary cross entropy from logits, numerically fused.
    pub fn bce_with_logits(&mut self, logits: Var, targets: ArrayD<f64>, weights: ArrayD<f64>) -> Var {
        let x = &self.values[logits.0];
        assert_eq!(x.shape(), targets.shape());
        assert_eq!(x.shape(), weights.shape());
        let wsum = weights.sum();
        let mut loss = 0.0;
        if wsum > 0.0 {
            Zip::from(x).and(&targets).and(&weights).for_each(|&v, &t, &w| {
                loss += w * (v.max(0.0) - v * t + (-v.abs()).exp().ln_1p());
            });
            loss /= wsum;
        }
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::BceWithLogits {
                logits: logits.0,
                targets: Arc::new(targets),
                weights: Arc::new(weights),
            },
        )
    }

    /// Mean squared error over the positions where `mask` is nonzero.
    pub fn mse_masked(&mut self, pred: Var, target: ArrayD<f64>, mask: ArrayD<f64>) -> Var {
        let x = &self.values[pred.0];
        assert_eq!(x.shape(), target.shape());
        assert_eq!(x.shape(), mask.shape());
        let msum = mask.sum();
        let mut loss = 0.0;
        if msum > 0.0 {
            Zip::from(x).and(&target).and(&mask).for_each(|&v, &t, &m| {
                loss += m * (v - t) * (v - t);
            });
            loss /= msum;
        }
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::MseMasked {
                pred: pred.0,
                target: Arc::new(target),
                mask: Arc::new(mask),
            },
        )
    }

    /// Smooth-L1 distance with unit transition point, averaged over every
    /// element.
    pub fn smooth_l1(&mut self, a: Var, b: Var) -> Var {
        let x = &self.values[a.0];
        let y = &self.values[b.0];
        assert_eq!(x.shape(), y.shape());
        let n = x.len().max(1) as f64;
        let mut loss = 0.0;
        Zip::from(x).and(y).for_each(|&u, &v| {
            let d = (u - v).abs();
            loss += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
        });
        loss /= n;
        self.push(ArrayD::from_elem(IxDyn(&[]), loss), Op::SmoothL1(a.0, b.0))
    }

    /// Backpropagates from a scalar loss; returns gradients for every
    /// parameter leaf touched by the graph.
    pub fn backward(&self, loss: Var) -> GradMap {
        assert_eq!(
            self.values[loss.0].len(),
            1,
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(ArrayD::ones(self.values[loss.0].raw_dim()));

        for id in (0..self.values.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            // re-store for parameter extraction below
            let keep_for_param = self.params.values().any(|&p| p == id);
            match &self.ops[id] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, reduce_to_shape(g.clone(), self.values[*a].shape()));
                    self.acc(&mut grads, *b, reduce_to_shape(g.clone(), self.values[*b].shape()));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, reduce_to_shape(g.clone(), self.values[*a].shape()));
                    self.acc(
                        &mut grads,
                        *b,
                        reduce_to_shape(g.mapv(|v| -v), self.values[*b].shape()),
                    );
                }
                Op::Mul(a, b) => {
                    let ga = binary_broadcast(&g, &self.values[*b], |x, y| x * y);
                    let gb = binary_broadcast(&g, &self.values[*a], |x, y| x * y);
                    self.acc(&mut grads, *a, reduce_to_shape(ga, self.values[*a].shape()));
                    self.acc(&mut grads, *b, reduce_to_shape(gb, self.values[*b].shape()));
                }
                Op::AddScalar(a) => self.acc(&mut grads, *a, g.clone()),
                Op::MulScalar(a, c) => self.acc(&mut grads, *a, g.mapv(|v| v * c)),
                Op::Exp(a) => {
                    let d = &g * &self.values[id];
                    self.acc(&mut grads, *a, d);
                }
                Op::Ln(a) => {
                    let d = &g / &self.values[*a];
                    self.acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = Zip::from(&g)
                        .and(&self.values[id])
                        .map_collect(|&gv, &y| gv * (1.0 - y * y));
                    self.acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = Zip::from(&g)
                        .and(&self.values[*a])
                        .map_collect(|&gv, &x| if x > 0.0 { gv } else { 0.0 });
                    self.acc(&mut grads, *a, d);
                }
                Op::MatMul(a, b) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let a2 = self.values[*a].view().into_dimensionality::<Ix2>().unwrap();
                    let b2 = self.values[*b].view().into_dimensionality::<Ix2>().unwrap();
                    self.acc(&mut grads, *a, g2.dot(&b2.t()).into_dyn());
                    self.acc(&mut grads, *b, a2.t().dot(&g2).into_dyn());
                }
                Op::BatchMatMul(a, b) => {
                    let bt = self.values[*b].view().permuted_axes(IxDyn(&[0, 2, 1])).to_owned();
                    let at = self.values[*a].view().permuted_axes(IxDyn(&[0, 2, 1])).to_owned();
                    self.acc(&mut grads, *a, bmm(&g, &bt));
                    self.acc(&mut grads, *b, bmm(&at, &g));
                }
                Op::Reshape(a) => {
                    let d = g
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(IxDyn(self.values[*a].shape()))
                        .unwrap();
                    self.acc(&mut grads, *a, d);
                }
                Op::Transpose(a, perm) => {
                    let mut inv = vec![0usize; perm.len()];
                    for (k, &p) in perm.iter().enumerate() {
                        inv[p] = k;
                    }
                    let d = g.view().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned();
                    self.acc(&mut grads, *a, d);
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.values[p].shape()[*axis];
                        let d = g
                            .slice_axis(Axis(*axis), Slice::from(start..start + len))
                            .to_owned();
                        self.acc(&mut grads, p, d);
                        start += len;
                    }
                }
                Op::Slice { x, axis, start, len } => {
                    let mut d = ArrayD::zeros(self.values[*x].raw_dim());
                    d.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                        .assign(&g);
                    self.acc(&mut grads, *x, d);
                }
                Op::GatherRows(a, idx) => {
                    let mut d = ArrayD::zeros(self.values[*a].raw_dim());
                    for (k, &row) in idx.iter().enumerate() {
                        let gk = g.index_axis(Axis(0), k);
                        let mut dr = d.index_axis_mut(Axis(0), row);
                        dr += &gk;
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::GatherDiag(a) => {
                    let mut d = ArrayD::zeros(self.values[*a].raw_dim());
                    for k in 0..g.len() {
                        d[[k, k]] = g[[k]];
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let y = &self.values[id];
                    let gy = &g * y;
                    let s = gy.sum_axis(Axis(y.ndim() - 1)).insert_axis(Axis(y.ndim() - 1));
                    let d = Zip::from(&gy)
                        .and(&(y * &s))
                        .map_collect(|&p, &q| p - q);
                    self.acc(&mut grads, *a, d);
                }
                Op::LogSoftmax(a) => {
                    let y = &self.values[id];
                    let p = y.mapv(f64::exp);
                    let s = g.sum_axis(Axis(y.ndim() - 1)).insert_axis(Axis(y.ndim() - 1));
                    let d = &g - &(&p * &s);
                    self.acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let gs = g[[]] as f64;
                    self.acc(
                        &mut grads,
                        *a,
                        ArrayD::from_elem(self.values[*a].raw_dim(), gs),
                    );
                }
                Op::Mean(a) => {
                    let n = self.values[*a].len().max(1) as f64;
                    let gs = g[[]] / n;
                    self.acc(
                        &mut grads,
                        *a,
                        ArrayD::from_elem(self.values[*a].raw_dim(), gs),
                    );
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = &self.values[*x];
                    let gv = &self.values[*gamma];
                    let d = *xv.shape().last().unwrap();
                    let last = Axis(xv.ndim() - 1);
                    let mut dx = ArrayD::zeros(xv.raw_dim());
                    let mut dgamma = ArrayD::zeros(IxDyn(&[d]));
                    let mut dbeta = ArrayD::zeros(IxDyn(&[d]));
                    for ((lane_x, lane_g), mut lane_dx) in xv
                        .lanes(last)
                        .into_iter()
                        .zip(g.lanes(last))
                        .zip(dx.lanes_mut(last))
                    {
                        let mean = lane_x.sum() / d as f64;
                        let var =
                            lane_x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = lane_x.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = lane_g
                            .iter()
                            .enumerate()
                            .map(|(k, gk)| gk * gv[[k]])
                            .collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for k in 0..d {
                            lane_dx[k] = inv * (dxhat[k] - m1 - xhat[k] * m2);
                            dgamma[[k]] += lane_g[k] * xhat[k];
                            dbeta[[k]] += lane_g[k];
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                    self.acc(&mut grads, *gamma, dgamma);
                    self.acc(&mut grads, *beta, dbeta);
                }
                Op::Dropout(a, mask) => {
                    let d = &g * mask.as_ref();
                    self.acc(&mut grads, *a, d);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                } => {
                    let wsum: f64 = weights.iter().sum();
                    if wsum > 0.0 {
                        let gs = g[[]] / wsum;
                        let mut d = softmax_last(&self.values[*logits]);
                        for (row, (&t, &w)) in targets.iter().zip(weights.iter()).enumerate() {
                            d[[row, t]] -= 1.0;
                            let mut r = d.index_axis_mut(Axis(0), row);
                            r *= w * gs;
                        }
                        self.acc(&mut grads, *logits, d);
                    }
                }
                Op::BceWithLogits {
                    logits,
                    targets,
                    weights,
                } => {
                    let wsum = weights.sum();
                    if wsum > 0.0 {
                        let gs = g[[]] / wsum;
                        let d = Zip::from(&self.values[*logits])
                            .and(targets.as_ref())
                            .and(weights.as_ref())
                            .map_collect(|&x, &t, &w| gs * w * (sigmoid(x) - t));
                        self.acc(&mut grads, *logits, d);
                    }
                }
                Op::MseMasked { pred, target, mask } => {
                    let msum = mask.sum();
                    if msum > 0.0 {
                        let gs = g[[]] / msum;
                        let d = Zip::from(&self.values[*pred])
                            .and(target.as_ref())
                            .and(mask.as_ref())
                            .map_collect(|&x, &t, &m| gs * m * 2.0 * (x - t));
                        self.acc(&mut grads, *pred, d);
                    }
                }
                Op::SmoothL1(a, b) => {
                    let n = self.values[*a].len().max(1) as f64;
                    let gs = g[[]] / n;
                    let d = Zip::from(&self.values[*a])
                        .and(&self.values[*b])
                        .map_collect(|&u, &v| gs * (u - v).clamp(-1.0, 1.0));
                    self.acc(&mut grads, *a, d.clone());
                    self.acc(&mut grads, *b, d.mapv(|v| -v));
                }
            }
            if keep_for_param {
                grads[id] = Some(g);
            }
        }

        let mut out = GradMap::new();
        for (name, &id) in &self.params {
            if let Some(g) = grads[id].take() {
                out.insert(name.clone(), g);
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<ArrayD<f64>>], id: usize, delta: ArrayD<f64>) {
        debug_assert_eq!(
            delta.shape(),
            self.values[id].shape(),
            "gradient shape mismatch at entry {id}"
        );
        match &mut grads[id] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Standard-normal tensor from the given generator.
pub fn sample_standard_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.sample(StandardNormal))
}

// --- optimizer -------------------------------------------------------------

/// AdamW with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: IndexMap<String, ArrayD<f64>>,
    pub v: IndexMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let theta = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(theta.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(theta.raw_dim()));
            Zip::from(theta)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|t, m, v, &gk| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * gk;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * gk * gk;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *t -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *t);
                });
        }
    }
}

// --- gradient checking ------------------------------------------------------

/// Result of comparing analytic gradients to central differences.
#[derive(Debug)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / (atol + rtol * max(|a|, |n|))`; at or
    /// below 1.0 means every sampled coordinate is inside tolerance.
    pub worst_ratio: f64,
    pub worst_coordinate: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.checked > 0 && self.worst_ratio <= 1.0
    }
}

/// Checks analytic gradients of `build` against central finite differences
/// with step `1e-5`, sampling up to `samples_per_param` coordinates of each
/// parameter. The builder must be deterministic for a fixed graph seed.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut build: F,
    samples_per_param: usize,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&mut Graph, &ParamStore) -> Var,
{
    const H: f64 = 1e-5;
    const ATOL: f64 = 1e-8;
    const RTOL: f64 = 1e-5;

    let mut g = Graph::new(true, seed);
    let loss = build(&mut g, store);
    let grads = g.backward(loss);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let names: Vec<String> = store.names().cloned().collect();
    let mut report = GradCheckReport {
        worst_ratio: 0.0,
        worst_coordinate: None,
        checked: 0,
    };

    for name in names {
        let len = store.get(&name).len();
        let mut coords: Vec<usize> = (0..len).collect();
        coords.shuffle(&mut rng);
        coords.truncate(samples_per_param.min(len));
        for k in coords {
            let orig = store.get(&name).as_slice().unwrap()[k];

            store.get_mut(&name).as_slice_mut().unwrap()[k] = orig + H;
            let mut gp = Graph::new(true, seed);
            let lp = build(&mut gp, store);
            let fp = gp.scalar_value(lp);

            store.get_mut(&name).as_slice_mut().unwrap()[k] = orig - H;
            let mut gm = Graph::new(true, seed);
            let lm = build(&mut gm, store);
            let fm = gm.scalar_value(lm);

            store.get_mut(&name).as_slice_mut().unwrap()[k] = orig;

            let numeric = (fp - fm) / (2.0 * H);
            let analytic = grads
                .get(&name)
                .map(|g| g.as_slice().unwrap()[k])
                .unwrap_or(0.0);
            let tol = ATOL + RTOL * analytic.abs().max(numeric.abs());
            let ratio = (analytic - numeric).abs() / tol;
            if ratio > report.worst_ratio {
                report.worst_ratio = ratio;
                report.worst_coordinate = Some((name.clone(), k));
            }
            report.checked += 1;
        }
    }
    report
}
