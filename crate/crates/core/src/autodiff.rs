//! A small reverse-mode tape over dense row-major matrices.
//!
//! Every forward op appends a node whose inputs already exist on the tape,
//! so node order is a topological order and backward is a single reverse
//! sweep. Forward values are never mutated after creation. Gradient flow is
//! cut only by an explicit [`Graph::stop_grad`] node.

use crate::error::{AmberError, Result};

/// Floor applied to log arguments inside backward rules only.
pub const LOG_CLAMP: f64 = 1e-12;

/// Dense 2-D tensor in row-major order. Vectors are `1 × n`, scalars `1 × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AmberError::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(AmberError::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// The single value of a `1 × 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// `a (m×k) · b (k×n)`.
fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

/// `aᵀ · b` without materializing the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

/// `a · bᵀ`.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Concat(Var, Var),
    Mean(Var),
    Sum(Var),
    StopGrad(Var),
    Js(Var, Var),
    SoftCrossEntropy { target: Var, pred: Var, weights: Vec<f64> },
}

/// Operation kinds, exposed for graph inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    ScalarMul,
    Relu,
    Sigmoid,
    Softmax,
    Concat,
    Mean,
    Sum,
    StopGrad,
    Js,
    SoftCrossEntropy,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Concat(..) => OpKind::Concat,
            Op::Mean(_) => OpKind::Mean,
            Op::Sum(_) => OpKind::Sum,
            Op::StopGrad(_) => OpKind::StopGrad,
            Op::Js(..) => OpKind::Js,
            Op::SoftCrossEntropy { .. } => OpKind::SoftCrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Concat(a, b)
            | Op::Js(a, b) => vec![*a, *b],
            Op::ScalarMul(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::StopGrad(a) => vec![*a],
            Op::SoftCrossEntropy { target, pred, .. } => vec![*target, *pred],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when no gradient reaches `v` (constants, stopped branches).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when none reached it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Reverse-mode tape. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = match &op {
            Op::Leaf | Op::StopGrad(_) => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Data leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(AmberError::Shape(format!(
                "matmul {}x{} by {}x{}",
                ta.rows, ta.cols, tb.rows, tb.cols
            )));
        }
        let out = matmul_raw(ta, tb);
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// Adds a `1 × n` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rows != 1 || tb.cols != tx.cols {
            return Err(AmberError::Shape(format!(
                "bias {}x{} for input {}x{}",
                tb.rows, tb.cols, tx.rows, tx.cols
            )));
        }
        let mut out = tx.clone();
        for row in out.data.chunks_mut(tx.cols) {
            for (o, b) in row.iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AmberError::Shape(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "elementwise mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scalar_mul(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| k * x);
        self.push(Op::ScalarMul(a, k), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    /// Row-wise softmax over the class axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.cols == 0 {
            return Err(AmberError::Shape("softmax over an empty axis".into()));
        }
        let mut out = t.clone();
        for row in out.data.chunks_mut(t.cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        Ok(self.push(Op::Softmax(a), out))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows != tb.rows {
            return Err(AmberError::Shape(format!("concat of {} and {} rows", ta.rows, tb.rows)));
        }
        let cols = ta.cols + tb.cols;
        let mut data = Vec::with_capacity(ta.rows * cols);
        for i in 0..ta.rows {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let out = Tensor {
            rows: ta.rows,
            cols,
            data,
        };
        Ok(self.push(Op::Concat(a, b), out))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.data.len().max(1) as f64;
        let out = Tensor::scalar(t.data.iter().sum::<f64>() / n);
        self.push(Op::Mean(a), out)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(Op::Sum(a), out)
    }

    /// Identity in the forward pass; blocks all gradient in the backward pass.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(Op::StopGrad(a), out)
    }

    /// Batch mean of the row-wise base-2 Jensen–Shannon divergence between
    /// two `B × C` distribution matrices.
    pub fn js(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q, "js")?;
        let (tp, tq) = (self.value(p), self.value(q));
        let b = tp.rows.max(1) as f64;
        let total: f64 = (0..tp.rows)
            .map(|i| crate::distlib::js_divergence_slice(tp.row(i), tq.row(i)))
            .sum();
        Ok(self.push(Op::Js(p, q), Tensor::scalar(total / b)))
    }

    /// Batch mean of `−Σ_c w_c · y_c · ln(max(s_c, 1e-12))`.
    pub fn soft_cross_entropy(&mut self, target: Var, pred: Var, weights: &[f64]) -> Result<Var> {
        self.same_shape(target, pred, "soft cross-entropy")?;
        let (ty, ts) = (self.value(target), self.value(pred));
        if weights.len() != ty.cols {
            return Err(AmberError::Shape(format!(
                "{} class weights for {} classes",
                weights.len(),
                ty.cols
            )));
        }
        let b = ty.rows.max(1) as f64;
        let mut total = 0.0;
        for i in 0..ty.rows {
            for ((&y, &s), &w) in ty.row(i).iter().zip(ts.row(i)).zip(weights) {
                if y != 0.0 {
                    total -= w * y * s.max(LOG_CLAMP).ln();
                }
            }
        }
        let op = Op::SoftCrossEntropy {
            target,
            pred,
            weights: weights.to_vec(),
        };
        Ok(self.push(op, Tensor::scalar(total / b)))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if !rt.is_scalar() {
            return Err(AmberError::Shape(format!(
                "backward from a {}x{} node; root must be scalar",
                rt.rows, rt.cols
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[bias.0].requires_grad {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols) {
                        for (o, v) in gb.data.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let mut ga = g.clone();
                    ga.data.iter_mut().zip(&tb.data).for_each(|(x, y)| *x *= y);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = g.clone();
                    gb.data.iter_mut().zip(&ta.data).for_each(|(x, y)| *x *= y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::ScalarMul(a, k) => self.accumulate(grads, *a, g.map(|x| k * x)),
            Op::Relu(a) => {
                let mut ga = g.clone();
                ga.data.iter_mut().zip(&self.value(*a).data).for_each(|(x, &inp)| {
                    if inp <= 0.0 {
                        *x = 0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                ga.data
                    .iter_mut()
                    .zip(&node.value.data)
                    .for_each(|(x, &s)| *x *= s * (1.0 - s));
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let cols = node.value.cols;
                let mut ga = g.clone();
                for (grow, srow) in ga.data.chunks_mut(cols).zip(node.value.data.chunks(cols)) {
                    let dot: f64 = grow.iter().zip(srow).map(|(x, s)| x * s).sum();
                    for (x, &s) in grow.iter_mut().zip(srow) {
                        *x = s * (*x - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(*a).cols, self.value(*b).cols);
                let mut ga = Vec::with_capacity(g.rows * ca);
                let mut gb = Vec::with_capacity(g.rows * cb);
                for row in g.data.chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor {
                        rows: g.rows,
                        cols: ca,
                        data: ga,
                    },
                );
                self.accumulate(
                    grads,
                    *b,
                    Tensor {
                        rows: g.rows,
                        cols: cb,
                        data: gb,
                    },
                );
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let scale = g.item() / t.data.len().max(1) as f64;
                self.accumulate(grads, *a, Tensor::filled(t.rows, t.cols, scale));
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(t.rows, t.cols, g.item()));
            }
            Op::Js(p, q) => {
                let (tp, tq) = (self.value(*p), self.value(*q));
                let scale = 0.5 * g.item() / tp.rows.max(1) as f64;
                let half_log =
                    |x: f64, m: f64| scale * (x.max(LOG_CLAMP).ln() - m.max(LOG_CLAMP).ln()) / std::f64::consts::LN_2;
                if self.nodes[p.0].requires_grad {
                    let data = tp
                        .data
                        .iter()
                        .zip(&tq.data)
                        .map(|(&a, &b)| half_log(a, 0.5 * (a + b)))
                        .collect();
                    self.accumulate(
                        grads,
                        *p,
                        Tensor {
                            rows: tp.rows,
                            cols: tp.cols,
                            data,
                        },
                    );
                }
                if self.nodes[q.0].requires_grad {
                    let data = tq
                        .data
                        .iter()
                        .zip(&tp.data)
                        .map(|(&b, &a)| half_log(b, 0.5 * (a + b)))
                        .collect();
                    self.accumulate(
                        grads,
                        *q,
                        Tensor {
                            rows: tq.rows,
                            cols: tq.cols,
                            data,
                        },
                    );
                }
            }
            Op::SoftCrossEntropy { target, pred, weights } => {
                let (ty, ts) = (self.value(*target), self.value(*pred));
                let scale = g.item() / ty.rows.max(1) as f64;
                if self.nodes[pred.0].requires_grad {
                    let mut gs = Tensor::zeros(ts.rows, ts.cols);
                    for (i, gs_row) in gs.data.chunks_mut(ts.cols).enumerate() {
                        for (c, out) in gs_row.iter_mut().enumerate() {
                            let s = ts.row(i)[c];
                            if s > LOG_CLAMP {
                                *out = -scale * weights[c] * ty.row(i)[c] / s;
                            }
                        }
                    }
                    self.accumulate(grads, *pred, gs);
                }
                if self.nodes[target.0].requires_grad {
                    let mut gy = Tensor::zeros(ty.rows, ty.cols);
                    for (i, gy_row) in gy.data.chunks_mut(ty.cols).enumerate() {
                        for (c, out) in gy_row.iter_mut().enumerate() {
                            *out = -scale * weights[c] * ts.row(i)[c].max(LOG_CLAMP).ln();
                        }
                    }
                    self.accumulate(grads, *target, gy);
                }
            }
        }
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub max_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor for relative errors, so entries whose true gradient is
/// zero are judged on absolute error at this scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Relative error used by [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares backward gradients of `f` with central differences of step `h`
/// on every entry of every input. Inputs enter `f` as trainable leaves.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(AmberError::Shape(format!(
                "grad_check needs a scalar output, got {}x{}",
                v.rows, v.cols
            )));
        }
        if !v.item().is_finite() {
            return Err(AmberError::Numerical("non-finite forward value".into()));
        }
        Ok((g, vars, out))
    };

    let (graph, vars, out) = eval(inputs)?;
    let grads = graph.backward(out)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input.rows, input.cols);
        let mut worst: f64 = 0.0;
        for j in 0..input.data.len() {
            let orig = input.data[j];
            work[k].data[j] = orig + h;
            let plus = eval(&work)?.0;
            let fp = plus.value(Var(plus.len() - 1)).item();
            work[k].data[j] = orig - h;
            let minus = eval(&work)?.0;
            let fm = minus.value(Var(minus.len() - 1)).item();
            work[k].data[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data[j], numeric));
        }
        per_input.push(worst);
    }
    let max_error = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_error,
        tol,
        passed: max_error <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zeros() {
        let mut g = Graph::new();
        let x = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i = g.constant(Tensor::identity(2));
        let xv = g.constant(x.clone());
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
        let z = g.constant(Tensor::zeros(2, 2));
        let y = g.matmul(z, xv).unwrap();
        assert_eq!(g.value(y), &Tensor::zeros(2, 3));
        assert!(g.matmul(xv, xv).is_err());
    }

    #[test]
    fn matmul_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let w = rand_tensor(&mut rng, 3, 2);
        let report = grad_check(
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                let w = g.constant(w.clone());
                let q = g.mul(p, w)?;
                Ok(g.sum(q))
            },
            &[a, b],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn elementwise_forward_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(1, 2, vec![-1.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let z = g.constant(Tensor::zeros(1, 4));
        let s = g.softmax(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.25; 4]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
        let e = g.constant(Tensor::zeros(2, 0));
        assert!(g.softmax(e).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(2, 2));
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::new(1, 2, vec![1.0, 2.0]).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        };
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let out = f(&mut g, &[xv]).unwrap();
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.get(xv).unwrap().data(), &[2.0, 4.0]);
        let report = grad_check(f, &[x], 1e-4, 1e-6).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn dead_relu_gives_zero_gradient() {
        let x = Tensor::new(1, 3, vec![-1.0, -0.5, -2.0]).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            let r = g.relu(v[0]);
            Ok(g.sum(r))
        };
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let out = f(&mut g, &[xv]).unwrap();
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.get(xv).unwrap().data(), &[0.0; 3]);
        assert!(grad_check(f, &[x], 1e-4, 1e-6).unwrap().passed);
    }

    #[test]
    fn grad_check_rejects_non_scalar_and_nan() {
        let x = Tensor::zeros(2, 2);
        assert!(grad_check(|g, v| Ok(g.relu(v[0])), std::slice::from_ref(&x), 1e-4, 1e-4).is_err());
        let f = |g: &mut Graph, v: &[Var]| {
            let k = g.scalar_mul(v[0], f64::NAN);
            Ok(g.sum(k))
        };
        assert!(matches!(grad_check(f, &[x], 1e-4, 1e-4), Err(AmberError::Numerical(_))));
    }

    #[test]
    fn js_node_minimum_and_stop_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = rand_tensor(&mut rng, 2, 3);

        let mut g = Graph::new();
        let l = g.param(logits.clone());
        let p = g.softmax(l).unwrap();
        let q = g.constant(g.value(p).clone());
        let js = g.js(p, q).unwrap();
        assert!(g.value(js).item().abs() < 1e-15);
        let grads = g.backward(js).unwrap();
        assert!(grads.get(p).unwrap().data().iter().all(|x| x.abs() < 1e-12));

        let mut g = Graph::new();
        let lp = g.param(logits.clone());
        let lq = g.param(rand_tensor(&mut rng, 2, 3));
        let p = g.softmax(lp).unwrap();
        let q = g.softmax(lq).unwrap();
        let qs = g.stop_grad(q);
        let js = g.js(p, qs).unwrap();
        let grads = g.backward(js).unwrap();
        assert!(grads.get(lq).is_none());
        assert!(grads.get(lp).is_some());
    }

    #[test]
    fn js_node_gradient_through_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = rand_tensor(&mut rng, 4, 3);
        let target = {
            let mut g = Graph::new();
            let t = g.constant(rand_tensor(&mut rng, 4, 3));
            let s = g.softmax(t).unwrap();
            g.value(s).clone()
        };
        let report = grad_check(
            |g, v| {
                let p = g.softmax(v[0])?;
                let q = g.constant(target.clone());
                g.js(p, q)
            },
            &[logits],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_tensor(&mut rng, 3, 5);
        let w = rand_tensor(&mut rng, 5, 4);
        let run = || {
            let mut g = Graph::new();
            let av = g.constant(a.clone());
            let wv = g.param(w.clone());
            let h = g.matmul(av, wv).unwrap();
            let s = g.softmax(h).unwrap();
            let m = g.mean(s);
            let sq = g.mul(m, m).unwrap();
            let grads = g.backward(sq).unwrap();
            grads.get(wv).unwrap().clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
