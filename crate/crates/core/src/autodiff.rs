//! Reverse-mode differentiation over a per-batch recorded tape.
//!
//! Every value is a dense `rows × cols` matrix. Scalars are `1 × 1`. A tape is
//! built fresh for each forward pass, the scalar objective is differentiated
//! once with [`Tape::backward`], and gradients are collected for every
//! registered parameter leaf.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{IdianError, Result};
use crate::nn::ParamKey;

pub type Matrix = Array2<f64>;

/// Probabilities are clamped to this floor before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamKey),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Log(Var),
    Sum(Var),
    ConcatRows(Vec<Var>),
    PairwiseSqDist(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::PairwiseSqDist(a) => self.nodes[a.0].needs_grad,
            Op::ConcatRows(parts) => parts.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(IdianError::config(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, key: ParamKey, value: Matrix) -> Var {
        self.push(value, Op::Param(key))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, k) = self.shape(a);
        let (k2, _) = self.shape(b);
        if k != k2 {
            return Err(IdianError::config(format!(
                "matmul: inner dimensions {k} and {k2} differ"
            )));
        }
        let out = self.value(a).dot(self.value(b));
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.shape(a);
        if self.shape(bias) != (1, cols) {
            return Err(IdianError::config(format!(
                "add_bias: bias shape {:?} for {cols} columns",
                self.shape(bias)
            )));
        }
        let out = self.value(a) + self.value(bias);
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Var {
        let out = self.value(a) + shift;
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    /// Natural log with the argument clamped to [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(LOG_FLOOR).ln());
        self.push(out, Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let total = self.sum(a);
        self.scale(total, 1.0 / n)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(IdianError::config("concat_rows: no inputs"));
        };
        let cols = self.shape(*first).1;
        if parts.iter().any(|p| self.shape(*p).1 != cols) {
            return Err(IdianError::config("concat_rows: column counts differ"));
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| IdianError::config(format!("concat_rows: {e}")))?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// `n × n` matrix of squared euclidean distances between the rows of `a`.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.nrows();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let d: f64 = x
                    .row(i)
                    .iter()
                    .zip(x.row(j).iter())
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
                out[[i, j]] = d;
                out[[j, i]] = d;
            }
        }
        self.push(out, Op::PairwiseSqDist(a))
    }

    /// Differentiates the `1 × 1` node `loss` with respect to every parameter
    /// leaf on the tape. Parameters that do not reach `loss` get zero.
    pub fn backward(&self, loss: Var) -> Result<GradientSet> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(IdianError::usage(
                "backward called without a recorded forward pass",
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(IdianError::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(_) => {
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let da = g.dot(&self.value(*b).t());
                        accumulate(&mut adj, *a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = self.value(*a).t().dot(&g);
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::AddBias(a, b) => {
                    if self.nodes[b.0].needs_grad {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut adj, *b, db);
                    }
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, &g * self.value(*b));
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, factor) => accumulate(&mut adj, *a, g * *factor),
                Op::AddScalar(a) => accumulate(&mut adj, *a, g),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut adj, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut adj, *a, d);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dots = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = y * &(g - &dots);
                    accumulate(&mut adj, *a, d);
                }
                Op::Log(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        *d = if x > LOG_FLOOR { *d / x } else { 0.0 };
                    });
                    accumulate(&mut adj, *a, d);
                }
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    accumulate(&mut adj, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.shape(*p).0;
                        if self.nodes[p.0].needs_grad {
                            let d = g.slice(s![start..start + rows, ..]).to_owned();
                            accumulate(&mut adj, *p, d);
                        }
                        start += rows;
                    }
                }
                Op::PairwiseSqDist(a) => {
                    let x = self.value(*a);
                    let sym = &g + &g.t();
                    let weights = sym.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = (x * &weights - sym.dot(x)) * 2.0;
                    accumulate(&mut adj, *a, d);
                }
            }
        }

        let mut grads = GradientSet::default();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(key) = &node.op {
                let g = adj[idx]
                    .take()
                    .unwrap_or_else(|| Array2::zeros(node.value.dim()));
                grads.add(*key, g);
            }
        }
        // Parameters registered after the loss node cannot reach it.
        for node in &self.nodes[loss.0 + 1..] {
            if let Op::Param(key) = &node.op {
                grads.add(*key, Array2::zeros(node.value.dim()));
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Gradients keyed by parameter. A parameter used several times on one tape
/// has its contributions summed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<ParamKey, Matrix>,
}

impl GradientSet {
    pub fn add(&mut self, key: ParamKey, g: Matrix) {
        match self.grads.get_mut(&key) {
            Some(existing) => *existing += &g,
            None => {
                self.grads.insert(key, g);
            }
        }
    }

    pub fn insert(&mut self, key: ParamKey, g: Matrix) {
        self.grads.insert(key, g);
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Matrix> {
        self.grads.get(key)
    }

    pub fn get_mut(&mut self, key: &ParamKey) -> Option<&mut Matrix> {
        self.grads.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Matrix)> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamKey, &mut Matrix)> {
        self.grads.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// Largest absolute entry, useful for diagnostics.
    pub fn max_abs(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}
