//! Define-by-run reverse-mode differentiation over dense arrays.
//!
//! A [`Tape`] records every operation in creation order. Because an
//! operation can only reference nodes that already exist, creation order is
//! a topological order, and [`Tape::backward`] simply walks the tape in
//! reverse. Gradients accumulate additively, so a parameter leaf used at
//! several sites receives the sum of all contributions.
//!
//! The tape is rebuilt for every batch; nothing here is shared across
//! threads.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tensor3, Vector};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
    Tensor3([usize; 3]),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Vector(Vector),
    Matrix(Matrix),
    Tensor3(Tensor3),
}

impl Value {
    pub fn shape(&self) -> Shape {
        match self {
            Value::Vector(v) => Shape::Vector(v.len()),
            Value::Matrix(m) => Shape::Matrix(m.rows(), m.cols()),
            Value::Tensor3(t) => Shape::Tensor3(t.dims()),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            Value::Vector(v) => v.as_slice(),
            Value::Matrix(m) => m.as_slice(),
            Value::Tensor3(t) => t.as_slice(),
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            Value::Vector(v) => v.as_mut_slice(),
            Value::Matrix(m) => m.as_mut_slice(),
            Value::Tensor3(t) => t.as_mut_slice(),
        }
    }

    pub fn len(&self) -> usize {
        self.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn with_data(shape: Shape, data: Vec<f64>) -> Value {
        match shape {
            Shape::Vector(_) => Value::Vector(Vector::from_vec(data)),
            Shape::Matrix(r, c) => Value::Matrix(Matrix::from_vec(r, c, data).expect("shape-consistent data")),
            Shape::Tensor3(d) => Value::Tensor3(Tensor3::from_vec(d, data).expect("shape-consistent data")),
        }
    }
}

impl From<Vector> for Value {
    fn from(v: Vector) -> Self {
        Value::Vector(v)
    }
}

impl From<Matrix> for Value {
    fn from(m: Matrix) -> Self {
        Value::Matrix(m)
    }
}

impl From<Tensor3> for Value {
    fn from(t: Tensor3) -> Self {
        Value::Tensor3(t)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MatVec(Var, Var),
    TMatVec(Var, Var),
    MatMulT(Var, Var),
    RowSelect(Var, usize),
    Reshape(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SmoothL1Mean(Var),
    CrossEntropy(Var, usize),
    FullBilinear(Var, Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Value,
    /// Empty means "all zeros"; materialized on first contribution.
    grad: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
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

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: impl Into<Value>) -> Var {
        self.push(value.into(), Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: impl Into<Value>) -> Var {
        self.push(value.into(), Op::Leaf, false)
    }

    fn push(&mut self, value: Value, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: Vec::new(),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Value, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Value of a length-one vector node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    pub fn vector(&self, v: Var) -> Result<&Vector> {
        match &self.nodes[v.0].value {
            Value::Vector(x) => Ok(x),
            other => Err(Error::shape("vector", format!("node holds {:?}", other.shape()))),
        }
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<&Matrix> {
        match &self.nodes[v.0].value {
            Value::Matrix(m) => Ok(m),
            other => Err(Error::shape(op, format!("expected a matrix, got {:?}", other.shape()))),
        }
    }

    fn vec_of(&self, v: Var, op: &'static str) -> Result<&Vector> {
        match &self.nodes[v.0].value {
            Value::Vector(x) => Ok(x),
            other => Err(Error::shape(op, format!("expected a vector, got {:?}", other.shape()))),
        }
    }

    /// Accumulated gradient of `v`, shaped like its value.
    pub fn grad(&self, v: Var) -> Value {
        let node = &self.nodes[v.0];
        let data = if node.grad.is_empty() {
            vec![0.0; node.value.len()]
        } else {
            node.grad.clone()
        };
        Value::with_data(node.value.shape(), data)
    }

    pub fn grad_slice(&self, v: Var) -> Vec<f64> {
        let node = &self.nodes[v.0];
        if node.grad.is_empty() {
            vec![0.0; node.value.len()]
        } else {
            node.grad.clone()
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.clear();
        }
    }

    fn elementwise(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(&x, &y)| f(x, y)).collect();
        let value = Value::with_data(va.shape(), data);
        Ok(self.derived(value, op, &[a, b]))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = &self.nodes[a.0].value;
        let value = Value::with_data(va.shape(), va.as_slice().iter().map(|&x| f(x)).collect());
        self.derived(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    /// `x * s` for a length-one vector node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != Shape::Vector(1) {
            return Err(Error::shape("mul_scalar", format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let factor = self.scalar(s);
        let vx = &self.nodes[x.0].value;
        let value = Value::with_data(vx.shape(), vx.as_slice().iter().map(|v| v * factor).collect());
        Ok(self.derived(value, Op::MulScalar(x, s), &[x, s]))
    }

    /// `m · x`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let out = self.matrix(m, "matvec")?.matvec(self.vec_of(x, "matvec")?)?;
        Ok(self.derived(out.into(), Op::MatVec(m, x), &[m, x]))
    }

    /// `mᵀ · x`.
    pub fn t_matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let out = self.matrix(m, "t_matvec")?.t_matvec(self.vec_of(x, "t_matvec")?)?;
        Ok(self.derived(out.into(), Op::TMatVec(m, x), &[m, x]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let ma = self.matrix(a, "matmul_t")?;
        let mb = self.matrix(b, "matmul_t")?;
        if ma.cols() != mb.cols() {
            return Err(Error::shape(
                "matmul_t",
                format!("{}x{} times transposed {}x{}", ma.rows(), ma.cols(), mb.rows(), mb.cols()),
            ));
        }
        let (n, m) = (ma.rows(), mb.rows());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = ma.row(i);
            for j in 0..m {
                data.push(ra.iter().zip(mb.row(j)).map(|(x, y)| x * y).sum());
            }
        }
        let out = Matrix::from_vec(n, m, data)?;
        Ok(self.derived(out.into(), Op::MatMulT(a, b), &[a, b]))
    }

    /// Row `row` of a matrix node, as a vector (embedding lookup).
    pub fn row(&mut self, m: Var, row: usize) -> Result<Var> {
        let mm = self.matrix(m, "row")?;
        if row >= mm.rows() {
            return Err(Error::InvalidArgument(format!("row {row} out of range for {} rows", mm.rows())));
        }
        let out = Vector::from_vec(mm.row(row).to_vec());
        Ok(self.derived(out.into(), Op::RowSelect(m, row), &[m]))
    }

    /// Reinterprets the node's data with a new shape of equal size.
    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let n = match shape {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
            Shape::Tensor3(d) => d.iter().product(),
        };
        if n != vx.len() {
            return Err(Error::shape("reshape", format!("{:?} into {shape:?}", vx.shape())));
        }
        let value = Value::with_data(shape, vx.as_slice().to_vec());
        Ok(self.derived(value, Op::Reshape(x), &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax(self.vec_of(x, "softmax")?.as_slice());
        Ok(self.derived(Vector::from_vec(out).into(), Op::Softmax(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.as_slice().iter().sum();
        self.derived(Vector::from_vec(vec![s]).into(), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vals = self.nodes[x.0].value.as_slice();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        self.derived(Vector::from_vec(vec![m]).into(), Op::Mean(x), &[x])
    }

    /// Mean over coordinates of the smooth-L1 penalty.
    pub fn smooth_l1_mean(&mut self, x: Var) -> Var {
        let vals = self.nodes[x.0].value.as_slice();
        let m = vals.iter().map(|&v| smooth_l1_scalar(v)).sum::<f64>() / vals.len() as f64;
        self.derived(Vector::from_vec(vec![m]).into(), Op::SmoothL1Mean(x), &[x])
    }

    /// Negative log-softmax probability of `target` under `scores`.
    pub fn cross_entropy(&mut self, scores: Var, target: usize) -> Result<Var> {
        let s = self.vec_of(scores, "cross_entropy")?;
        if target >= s.len() {
            return Err(Error::InvalidArgument(format!("target {target} out of range for {} classes", s.len())));
        }
        let loss = log_sum_exp(s.as_slice()) - s[target];
        Ok(self.derived(Vector::from_vec(vec![loss]).into(), Op::CrossEntropy(scores, target), &[scores]))
    }

    /// `(T ×₁ q) ×₂ v` on tape.
    pub fn full_bilinear(&mut self, t: Var, q: Var, v: Var) -> Result<Var> {
        let tt = match &self.nodes[t.0].value {
            Value::Tensor3(x) => x,
            other => return Err(Error::shape("full_bilinear", format!("expected a tensor, got {:?}", other.shape()))),
        };
        let out = crate::linalg::full_bilinear(tt, self.vec_of(q, "full_bilinear")?, self.vec_of(v, "full_bilinear")?)?;
        Ok(self.derived(out.into(), Op::FullBilinear(t, q, v), &[t, q, v]))
    }

    /// Reverse pass from a scalar node. Leaf gradients add onto whatever the
    /// accumulators already hold; call [`Tape::zero_grads`] between passes
    /// to start fresh.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss node is not on this tape".into()));
        }
        if self.shape(loss) != Shape::Vector(1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        // Interior accumulators are per-pass scratch; only leaves accumulate
        // across passes.
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad.clear();
            }
        }
        accumulate(&mut self.nodes[loss.0], &[1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || node.grad.is_empty() || matches!(node.op, Op::Leaf) {
                continue;
            }
            for (parent, contribution) in self.contributions(idx) {
                if self.nodes[parent.0].needs_grad {
                    accumulate(&mut self.nodes[parent.0], &contribution);
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` with respect to its parents.
    fn contributions(&self, idx: usize) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let g = node.grad.as_slice();
        let y = node.value.as_slice();
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::with_capacity(3);
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                if wants(a) {
                    out.push((a, g.iter().zip(vb).map(|(g, b)| g * b).collect()));
                }
                if wants(b) {
                    out.push((b, g.iter().zip(va).map(|(g, a)| g * a).collect()));
                }
            }
            Op::Scale(a, c) => out.push((a, g.iter().map(|x| x * c).collect())),
            Op::MulScalar(x, s) => {
                let factor = val(s)[0];
                if wants(x) {
                    out.push((x, g.iter().map(|v| v * factor).collect()));
                }
                if wants(s) {
                    let ds = g.iter().zip(val(x)).map(|(g, x)| g * x).sum();
                    out.push((s, vec![ds]));
                }
            }
            Op::MatVec(m, x) => {
                let mm = self.as_matrix(m);
                let xs = val(x);
                if wants(m) {
                    let mut dm = Vec::with_capacity(mm.rows() * mm.cols());
                    for &gi in g {
                        dm.extend(xs.iter().map(|xj| gi * xj));
                    }
                    out.push((m, dm));
                }
                if wants(x) {
                    let dx = mm.t_matvec(&Vector::from_vec(g.to_vec())).expect("matvec shapes checked forward");
                    out.push((x, dx.into_vec()));
                }
            }
            Op::TMatVec(m, x) => {
                let mm = self.as_matrix(m);
                let xs = val(x);
                if wants(m) {
                    let mut dm = Vec::with_capacity(mm.rows() * mm.cols());
                    for &xi in xs {
                        dm.extend(g.iter().map(|gj| xi * gj));
                    }
                    out.push((m, dm));
                }
                if wants(x) {
                    let dx = mm.matvec(&Vector::from_vec(g.to_vec())).expect("t_matvec shapes checked forward");
                    out.push((x, dx.into_vec()));
                }
            }
            Op::MatMulT(a, b) => {
                let (ma, mb) = (self.as_matrix(a), self.as_matrix(b));
                let gm = Matrix::from_vec(ma.rows(), mb.rows(), g.to_vec()).expect("grad shape");
                if wants(a) {
                    out.push((a, gm.matmul(mb).expect("shapes").as_slice().to_vec()));
                }
                if wants(b) {
                    out.push((b, gm.transpose().matmul(ma).expect("shapes").as_slice().to_vec()));
                }
            }
            Op::RowSelect(m, row) => {
                let mm = self.as_matrix(m);
                let mut dm = vec![0.0; mm.rows() * mm.cols()];
                dm[row * mm.cols()..(row + 1) * mm.cols()].copy_from_slice(g);
                out.push((m, dm));
            }
            Op::Reshape(x) => out.push((x, g.to_vec())),
            Op::Tanh(x) => out.push((x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect())),
            Op::Sigmoid(x) => out.push((x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())),
            Op::Softmax(x) => {
                let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                out.push((x, g.iter().zip(y).map(|(g, y)| y * (g - dot)).collect()));
            }
            Op::Sum(x) => out.push((x, vec![g[0]; val(x).len()])),
            Op::Mean(x) => {
                let n = val(x).len();
                out.push((x, vec![g[0] / n as f64; n]));
            }
            Op::SmoothL1Mean(x) => {
                let xs = val(x);
                let k = g[0] / xs.len() as f64;
                out.push((x, xs.iter().map(|&v| k * smooth_l1_slope(v)).collect()));
            }
            Op::CrossEntropy(s, target) => {
                let mut p = softmax(val(s));
                p[target] -= 1.0;
                out.push((s, p.into_iter().map(|v| v * g[0]).collect()));
            }
            Op::FullBilinear(t, q, v) => {
                let [d1, d2, d3] = match &self.nodes[t.0].value {
                    Value::Tensor3(tt) => tt.dims(),
                    _ => unreachable!("checked in forward"),
                };
                let (tt, qs, vs) = (val(t), val(q), val(v));
                let mut dt = vec![0.0; d1 * d2 * d3];
                let mut dq = vec![0.0; d1];
                let mut dv = vec![0.0; d2];
                for i in 0..d1 {
                    for j in 0..d2 {
                        let base = (i * d2 + j) * d3;
                        let mut tg = 0.0;
                        for k in 0..d3 {
                            dt[base + k] = g[k] * qs[i] * vs[j];
                            tg += tt[base + k] * g[k];
                        }
                        dq[i] += tg * vs[j];
                        dv[j] += tg * qs[i];
                    }
                }
                out.push((t, dt));
                out.push((q, dq));
                out.push((v, dv));
            }
        }
        out
    }

    fn as_matrix(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Matrix(m) => m,
            _ => unreachable!("checked in forward"),
        }
    }
}

fn accumulate(node: &mut Node, contribution: &[f64]) {
    if node.grad.is_empty() {
        node.grad = contribution.to_vec();
    } else {
        for (g, c) in node.grad.iter_mut().zip(contribution) {
            *g += c;
        }
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

/// Max-subtracted softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

pub(crate) fn smooth_l1_scalar(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_slope(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Compares an analytic gradient against central differences of `f`.
///
/// Returns `max_i |analytic_i - fd_i| / max(1, |analytic_i|)`.
pub fn finite_difference_check(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    analytic: &[f64],
    point: &[f64],
    step: f64,
) -> Result<f64> {
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    if analytic.len() != point.len() {
        return Err(Error::shape(
            "finite_difference_check",
            format!("{} gradient entries for {} coordinates", analytic.len(), point.len()),
        ));
    }
    let mut p = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let plus = f(&p)?;
        p[i] = orig - step;
        let minus = f(&p)?;
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value while perturbing coordinate {i}")));
        }
        let fd = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Finite-difference check of a tape-built scalar function of `inputs`.
///
/// `build` receives one leaf per input and returns the loss node. Every
/// coordinate of every input is perturbed.
pub fn check_tape_gradients(
    inputs: &[Value],
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    step: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = build(&mut tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = leaves.iter().flat_map(|&l| tape.grad_slice(l)).collect();
    let point: Vec<f64> = inputs.iter().flat_map(|v| v.as_slice().to_vec()).collect();

    let mut eval = |flat: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let mut offset = 0;
        let leaves: Vec<Var> = inputs
            .iter()
            .map(|v| {
                let mut v = v.clone();
                let n = v.len();
                v.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
                tape.leaf(v)
            })
            .collect();
        let loss = build(&mut tape, &leaves)?;
        Ok(tape.scalar(loss))
    };
    finite_difference_check(&mut eval, &analytic, &point, step)
}
