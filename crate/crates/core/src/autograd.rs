//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! gradients. Everything is two-dimensional; vectors are `1 × n` or `n × 1`
//! and scalars are `1 × 1`.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `a [n×m] + row [1×m]` broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    /// `a [n×m] ∘ col [n×1]` broadcast over columns.
    MulCol(Var, Var),
    /// `a [n×m] ∘ row [1×m]` broadcast over rows.
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    NormalizeRows(Var),
    EntropyRows(Var),
    CrossEntropyRows(Var, Rc<Vec<usize>>),
    SumAll(Var),
    /// Sum across columns, `[n×m] → [n×1]`.
    SumCols(Var),
    /// Mean across rows, `[n×m] → [1×m]`.
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Gather(Var, Rc<Vec<usize>>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    /// Per-op cache needed by the backward pass (layer-norm inverse std,
    /// row norms, softmax probabilities).
    aux: Option<Array2<f64>>,
    requires_grad: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tape of operations. Build one per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(1024),
            param_vars: HashMap::new(),
            track_params: true,
        }
    }

    /// A graph whose parameter leaves do not require gradients. Forward
    /// values are identical to a tracking graph.
    pub fn inference() -> Self {
        Graph {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, aux: Option<Array2<f64>>) -> Var {
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param => self.track_params,
            other => parents(other).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            aux,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input, None)
    }

    /// Leaf whose gradient is tracked regardless of the graph mode. Used to
    /// differentiate with respect to intermediate quantities in tests.
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            aux: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.input(Array2::from_elem((1, 1), x))
    }

    /// Parameter leaf. Repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, None);
        self.param_vars.insert(id, v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), None)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b), None)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a), None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), None)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row), None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), None)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.shape(col).1, 1);
        let value = self.value(a) * self.value(col);
        self.push(value, Op::MulCol(a, col), None)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row), None)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c), None)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a), None)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a), None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), None)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a), None)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Log(a), None)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.push(value, Op::Abs(a), None)
    }

    /// Row-wise softmax. Entries equal to `f64::NEG_INFINITY` receive zero
    /// probability.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a), None)
    }

    /// Row-wise standardization (zero mean, unit variance) without affine
    /// parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, m) = x.dim();
        let mut out = Array2::zeros((n, m));
        let mut inv_std = Array2::zeros((n, 1));
        for (r, row) in x.outer_iter().enumerate() {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[[r, 0]] = is;
            for (c, v) in row.iter().enumerate() {
                out[[r, c]] = (v - mean) * is;
            }
        }
        self.push(out, Op::LayerNormRows(a), Some(inv_std))
    }

    /// Row-wise L2 normalization. Callers must ensure no row has zero norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms = x
            .map_axis(Axis(1), |row| row.dot(&row).sqrt())
            .insert_axis(Axis(1));
        let value = x / &norms;
        self.push(value, Op::NormalizeRows(a), Some(norms))
    }

    /// Shannon entropy (natural log) of each row, `[n×m] → [n×1]`, with
    /// `0 · ln 0 = 0`.
    pub fn entropy_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map_axis(Axis(1), |row| {
                -row.iter()
                    .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
                    .sum::<f64>()
            })
            .insert_axis(Axis(1));
        self.push(value, Op::EntropyRows(a), None)
    }

    /// Per-row negative log-likelihood of `targets` under a row-wise softmax
    /// of `logits`, `[n×V] → [n×1]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len(), "one target per row");
        let probs = softmax_rows(x);
        let value = Array2::from_shape_fn((targets.len(), 1), |(r, _)| {
            let row = x.row(r);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[targets[r]]
        });
        self.push(
            value,
            Op::CrossEntropyRows(logits, Rc::new(targets.to_vec())),
            Some(probs),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a), None)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumCols(a), None)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.nrows() as f64;
        let value = (x.sum_axis(Axis(0)) / n).insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a), None)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(value, Op::ConcatCols(parts.to_vec()), None)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(value, Op::ConcatRows(parts.to_vec()), None)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end), None)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start, end), None)
    }

    /// Rows of `table` selected by `indices` (embedding lookup).
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let m = t.ncols();
        let mut value = Array2::zeros((indices.len(), m));
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).assign(&t.row(i));
        }
        self.push(value, Op::Gather(table, Rc::new(indices.to_vec())), None)
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        let mut params = BTreeMap::new();
        for (id, v) in &self.param_vars {
            if let Some(Some(g)) = grads.get(v.0) {
                params.insert(*id, g.clone());
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn propagate(&self, idx: usize, grad: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    accumulate(grads, *a, grad.dot(&self.value(*b).t()));
                }
                if needs(b) {
                    accumulate(grads, *b, self.value(*a).t().dot(grad));
                }
            }
            Op::MatMulT(a, b) => {
                if needs(a) {
                    accumulate(grads, *a, grad.dot(self.value(*b)));
                }
                if needs(b) {
                    accumulate(grads, *b, grad.t().dot(self.value(*a)));
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, grad.t().to_owned()),
            Op::Add(a, b) => {
                if needs(a) {
                    accumulate(grads, *a, grad.clone());
                }
                if needs(b) {
                    accumulate(grads, *b, grad.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(grads, *a, grad.clone());
                }
                if needs(b) {
                    accumulate(grads, *b, -grad);
                }
            }
            Op::AddRow(a, row) => {
                if needs(a) {
                    accumulate(grads, *a, grad.clone());
                }
                if needs(row) {
                    accumulate(grads, *row, grad.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    accumulate(grads, *a, grad * self.value(*b));
                }
                if needs(b) {
                    accumulate(grads, *b, grad * self.value(*a));
                }
            }
            Op::MulCol(a, col) => {
                if needs(a) {
                    accumulate(grads, *a, grad * self.value(*col));
                }
                if needs(col) {
                    let g = (grad * self.value(*a))
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    accumulate(grads, *col, g);
                }
            }
            Op::MulRow(a, row) => {
                if needs(a) {
                    accumulate(grads, *a, grad * self.value(*row));
                }
                if needs(row) {
                    let g = (grad * self.value(*a))
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(grads, *row, g);
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, grad * *c),
            Op::Gelu(a) => {
                let mut g = self.value(*a).mapv(gelu_grad);
                g *= grad;
                accumulate(grads, *a, g);
            }
            Op::Relu(a) => {
                let mut g = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                g *= grad;
                accumulate(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let mut g = node.value.mapv(|y| y * (1.0 - y));
                g *= grad;
                accumulate(grads, *a, g);
            }
            Op::Exp(a) => accumulate(grads, *a, grad * &node.value),
            Op::Log(a) => accumulate(grads, *a, grad / self.value(*a)),
            Op::Abs(a) => {
                let mut g = self.value(*a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                g *= grad;
                accumulate(grads, *a, g);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let dot = (grad * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let g = y * &(grad - &dot);
                accumulate(grads, *a, g);
            }
            Op::LayerNormRows(a) => {
                let y = &node.value;
                let inv_std = node.aux.as_ref().expect("layer norm cache");
                let m = y.ncols() as f64;
                let mean_g = grad.sum_axis(Axis(1)).insert_axis(Axis(1)) / m;
                let mean_gy = (grad * y).sum_axis(Axis(1)).insert_axis(Axis(1)) / m;
                let g = (grad - &mean_g - &(y * &mean_gy)) * inv_std;
                accumulate(grads, *a, g);
            }
            Op::NormalizeRows(a) => {
                let y = &node.value;
                let norms = node.aux.as_ref().expect("norm cache");
                let dot = (grad * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let g = (grad - &(y * &dot)) / norms;
                accumulate(grads, *a, g);
            }
            Op::EntropyRows(a) => {
                let p = self.value(*a);
                let mut g = p.mapv(|x| if x > 0.0 { -(x.ln() + 1.0) } else { 0.0 });
                g *= grad;
                accumulate(grads, *a, g);
            }
            Op::CrossEntropyRows(logits, targets) => {
                let mut g = node.aux.as_ref().expect("softmax cache").clone();
                for (r, &t) in targets.iter().enumerate() {
                    g[[r, t]] -= 1.0;
                }
                g *= grad;
                accumulate(grads, *logits, g);
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a);
                accumulate(grads, *a, Array2::from_elem(shape, grad[[0, 0]]));
            }
            Op::SumCols(a) => {
                let shape = self.shape(*a);
                let g = grad
                    .broadcast(shape)
                    .expect("column gradient broadcasts")
                    .to_owned();
                accumulate(grads, *a, g);
            }
            Op::MeanRows(a) => {
                let shape = self.shape(*a);
                let g = grad
                    .broadcast(shape)
                    .expect("row gradient broadcasts")
                    .to_owned()
                    / shape.0 as f64;
                accumulate(grads, *a, g);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if needs(p) {
                        accumulate(grads, *p, grad.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    if needs(p) {
                        accumulate(grads, *p, grad.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut g = Array2::zeros(self.shape(*a));
                g.slice_mut(s![.., *start..*end]).assign(grad);
                accumulate(grads, *a, g);
            }
            Op::SliceRows(a, start, end) => {
                let mut g = Array2::zeros(self.shape(*a));
                g.slice_mut(s![*start..*end, ..]).assign(grad);
                accumulate(grads, *a, g);
            }
            Op::Gather(table, indices) => {
                let mut g = Array2::zeros(self.shape(*table));
                for (r, &i) in indices.iter().enumerate() {
                    let mut dst = g.row_mut(i);
                    dst += &grad.row(r);
                }
                accumulate(grads, *table, g);
            }
        }
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Input | Op::Param => Vec::new(),
        Op::MatMul(a, b)
        | Op::MatMulT(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::AddRow(a, b)
        | Op::Mul(a, b)
        | Op::MulCol(a, b)
        | Op::MulRow(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Gelu(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Abs(a)
        | Op::SoftmaxRows(a)
        | Op::LayerNormRows(a)
        | Op::NormalizeRows(a)
        | Op::EntropyRows(a)
        | Op::CrossEntropyRows(a, _)
        | Op::SumAll(a)
        | Op::SumCols(a)
        | Op::MeanRows(a)
        | Op::SliceCols(a, _, _)
        | Op::SliceRows(a, _, _)
        | Op::Gather(a, _) => vec![*a],
        Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => Zip::from(existing).and(&g).for_each(|e, x| *e += x),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Array2<f64>>>,
    params: BTreeMap<ParamId, Array2<f64>>,
}

impl Gradients {
    /// Gradient with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Array2<f64>> {
        &self.params
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

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}
