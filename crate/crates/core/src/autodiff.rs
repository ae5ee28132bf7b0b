//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records every operation applied to tracked values. Leaves
//! registered with [`Tape::leaf`] receive gradients from [`Tape::backward`];
//! constants and [`Tape::detach`]ed nodes never propagate gradient to their
//! ancestors. The only implicit broadcast is scalar-times-tensor; adding a bias
//! row to a batch is an explicit op ([`Tape::add_bias`]).
//!
//! ```
//! use gate_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::vector(vec![3.0]));
//! let one = tape.constant(Tensor::vector(vec![1.0]));
//! let loss = tape.mean_sq_diff(w, one).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[4.0]);
//! ```

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{GateError, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(GateError::InvalidTensor(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(GateError::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor of shape `[rows, cols]`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stack equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(GateError::ShapeMismatch {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Leading dimension for 2-D tensors, 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dim")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn as_matrix_dims(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Some((1, *n)),
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

/// Pairwise (tree) summation. Blocks of up to 8 are summed left to right.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Operation kinds supported by the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Scale,
    MulScalar,
    AddBias,
    Tanh,
    MeanSqDiff,
    RowNorm,
    Sum,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Constant,
    Detached,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    /// tensor, scalar
    MulScalar(usize, usize),
    /// batch, bias row
    AddBias(usize, usize),
    Tanh(usize),
    MeanSqDiff(usize, usize),
    RowNorm(usize),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a computation. Parents always precede children.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    leaves: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(GateError::NotOnTape(v.index));
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        let i = self.check(v)?;
        Ok(&self.nodes[i])
    }

    /// Register a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value, true);
        self.leaves.push(v.index);
        v
    }

    /// Record a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    /// Same values as `v`, but blocks all gradient flow to `v`'s ancestors.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.node(v)?.value.clone();
        Ok(self.push(Op::Detached, value, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v).expect("var belongs to this tape")].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert!(t.is_scalar());
        t.data[0]
    }

    pub fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.leaves.iter().map(|&index| Var {
            tape: self.id,
            index,
        })
    }

    fn unary_grad(&self, a: usize) -> bool {
        self.nodes[a].requires_grad
    }

    fn binary_grad(&self, a: usize, b: usize) -> bool {
        self.nodes[a].requires_grad || self.nodes[b].requires_grad
    }

    /// Generic entry point dispatching on [`OpKind`]. `Scale` takes its factor
    /// from `factor`; all other kinds ignore it.
    pub fn forward(&mut self, kind: OpKind, inputs: &[Var], factor: f64) -> Result<Var> {
        let arity = match kind {
            OpKind::Scale | OpKind::Tanh | OpKind::RowNorm | OpKind::Sum => 1,
            _ => 2,
        };
        if inputs.len() != arity {
            return Err(GateError::InvalidArgument(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::Scale => self.scale(inputs[0], factor),
            OpKind::MulScalar => self.mul_scalar(inputs[0], inputs[1]),
            OpKind::AddBias => self.add_bias(inputs[0], inputs[1]),
            OpKind::Tanh => self.tanh(inputs[0]),
            OpKind::MeanSqDiff => self.mean_sq_diff(inputs[0], inputs[1]),
            OpKind::RowNorm => self.row_norm(inputs[0]),
            OpKind::Sum => self.sum(inputs[0]),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let dims = (av.as_matrix_dims(), bv.as_matrix_dims());
        let ((m, k), (k2, n)) = match dims {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => {
                return Err(GateError::ShapeMismatch {
                    op: "matmul",
                    left: av.shape.clone(),
                    right: bv.shape.clone(),
                })
            }
        };
        debug_assert_eq!(k, k2);
        let out = matmul_raw(&av.data, &bv.data, m, k, n);
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        let rg = self.binary_grad(ai, bi);
        Ok(self.push(Op::MatMul(ai, bi), value, rg))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (&self.nodes[a].value.shape, &self.nodes[b].value.shape);
        if sa != sb {
            return Err(GateError::ShapeMismatch {
                op,
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("add", ai, bi)?;
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.binary_grad(ai, bi);
        Ok(self.push(Op::Add(ai, bi), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("sub", ai, bi)?;
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.binary_grad(ai, bi);
        Ok(self.push(Op::Sub(ai, bi), value, rg))
    }

    /// Multiply by a fixed real.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let data = av.data.iter().map(|x| x * factor).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.unary_grad(ai);
        Ok(self.push(Op::Scale(ai, factor), value, rg))
    }

    /// Multiply tensor `t` by the one-element node `s`.
    pub fn mul_scalar(&mut self, t: Var, s: Var) -> Result<Var> {
        let (ti, si) = (self.check(t)?, self.check(s)?);
        let (tv, sv) = (&self.nodes[ti].value, &self.nodes[si].value);
        if !sv.is_scalar() {
            return Err(GateError::ShapeMismatch {
                op: "mul_scalar",
                left: tv.shape.clone(),
                right: sv.shape.clone(),
            });
        }
        let c = sv.data[0];
        let data = tv.data.iter().map(|x| x * c).collect();
        let value = Tensor {
            shape: tv.shape.clone(),
            data,
        };
        let rg = self.binary_grad(ti, si);
        Ok(self.push(Op::MulScalar(ti, si), value, rg))
    }

    /// Add the bias row `b` (`[n]` or `[1, n]`) to every row of `x` (`[m, n]`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.check(x)?, self.check(b)?);
        let (xv, bv) = (&self.nodes[xi].value, &self.nodes[bi].value);
        let ok = xv.as_matrix_dims().is_some()
            && bv.as_matrix_dims().map(|(r, c)| r == 1 && c == xv.cols()) == Some(true);
        if !ok {
            return Err(GateError::ShapeMismatch {
                op: "add_bias",
                left: xv.shape.clone(),
                right: bv.shape.clone(),
            });
        }
        let n = xv.cols();
        let mut data = xv.data.clone();
        for row in data.chunks_exact_mut(n) {
            for (o, bias) in row.iter_mut().zip(&bv.data) {
                *o += bias;
            }
        }
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let rg = self.binary_grad(xi, bi);
        Ok(self.push(Op::AddBias(xi, bi), value, rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let data = av.data.iter().map(|x| x.tanh()).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.unary_grad(ai);
        Ok(self.push(Op::Tanh(ai), value, rg))
    }

    /// `mean((a - b)^2)` as a one-element tensor.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("mean_sq_diff", ai, bi)?;
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let sq: Vec<f64> = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(x, y)| (x - y) * (x - y))
            .collect();
        let value = Tensor::scalar(pairwise_sum(&sq) / sq.len() as f64);
        let rg = self.binary_grad(ai, bi);
        Ok(self.push(Op::MeanSqDiff(ai, bi), value, rg))
    }

    /// Euclidean norm of each row: `[m, n] -> [m, 1]`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let (m, n) = av.as_matrix_dims().ok_or_else(|| GateError::ShapeMismatch {
            op: "row_norm",
            left: av.shape.clone(),
            right: vec![],
        })?;
        let data = av
            .data
            .chunks_exact(n)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let value = Tensor {
            shape: vec![m, 1],
            data,
        };
        let rg = self.unary_grad(ai);
        Ok(self.push(Op::RowNorm(ai), value, rg))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let value = Tensor::scalar(pairwise_sum(&self.nodes[ai].value.data));
        let rg = self.unary_grad(ai);
        Ok(self.push(Op::Sum(ai), value, rg))
    }

    /// Sum a list of same-shaped nodes left to right. Empty input yields a
    /// zero scalar constant.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Gradients of the scalar `loss` with respect to every registered leaf.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let li = self.check(loss)?;
        let lv = &self.nodes[li].value;
        if !lv.is_scalar() {
            return Err(GateError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Constant | Op::Detached => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    let (m, k) = av.as_matrix_dims().expect("checked in forward");
                    let n = bv.cols();
                    if self.nodes[a].requires_grad {
                        // dA = G B^T
                        let mut da = vec![0.0; m * k];
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for c in 0..k {
                                let brow = &bv.data[c * n..(c + 1) * n];
                                da[r * k + c] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut grads, a, da);
                    }
                    if self.nodes[b].requires_grad {
                        // dB = A^T G
                        let mut db = vec![0.0; k * n];
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for c in 0..k {
                                let a_rc = av.data[r * k + c];
                                let out = &mut db[c * n..(c + 1) * n];
                                for (o, gv) in out.iter_mut().zip(grow) {
                                    *o += a_rc * gv;
                                }
                            }
                        }
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a].requires_grad {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.nodes[b].requires_grad {
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[a].requires_grad {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.nodes[b].requires_grad {
                        accumulate(&mut grads, b, g.iter().map(|x| -x).collect());
                    }
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads, a, g.iter().map(|x| x * f).collect());
                }
                Op::MulScalar(t, s) => {
                    let c = self.nodes[s].value.data[0];
                    if self.nodes[s].requires_grad {
                        let tv = &self.nodes[t].value.data;
                        let ds: Vec<f64> = g.iter().zip(tv).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, s, vec![pairwise_sum(&ds)]);
                    }
                    if self.nodes[t].requires_grad {
                        accumulate(&mut grads, t, g.iter().map(|x| x * c).collect());
                    }
                }
                Op::AddBias(x, b) => {
                    if self.nodes[b].requires_grad {
                        let n = self.nodes[b].value.len();
                        let mut db = vec![0.0; n];
                        for row in g.chunks_exact(n) {
                            for (o, v) in db.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, b, db);
                    }
                    if self.nodes[x].requires_grad {
                        accumulate(&mut grads, x, g);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value.data;
                    let da = g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                    accumulate(&mut grads, a, da);
                }
                Op::MeanSqDiff(a, b) => {
                    let (av, bv) = (&self.nodes[a].value.data, &self.nodes[b].value.data);
                    let coef = 2.0 * g[0] / av.len() as f64;
                    let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| coef * (x - y)).collect();
                    if self.nodes[b].requires_grad {
                        accumulate(&mut grads, b, diff.iter().map(|x| -x).collect());
                    }
                    if self.nodes[a].requires_grad {
                        accumulate(&mut grads, a, diff);
                    }
                }
                Op::RowNorm(a) => {
                    let av = &self.nodes[a].value;
                    let n = av.cols();
                    let mut da = vec![0.0; av.len()];
                    for (r, (row, out)) in av
                        .data
                        .chunks_exact(n)
                        .zip(da.chunks_exact_mut(n))
                        .enumerate()
                    {
                        let norm = node.value.data[r];
                        // subgradient 0 at the origin
                        if norm > 0.0 {
                            let s = g[r] / norm;
                            for (o, x) in out.iter_mut().zip(row) {
                                *o = s * x;
                            }
                        }
                    }
                    accumulate(&mut grads, a, da);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a].value.len();
                    accumulate(&mut grads, a, vec![g[0]; n]);
                }
            }
        }

        let mut map = HashMap::with_capacity(self.leaves.len());
        for &leaf in &self.leaves {
            let shape = self.nodes[leaf].value.shape.clone();
            let tensor = match grads.get_mut(leaf).and_then(Option::take) {
                Some(data) => Tensor { shape, data },
                None => Tensor::zeros(shape),
            };
            map.insert(leaf, tensor);
        }
        Ok(GradientMap {
            tape: self.id,
            grads: map,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], index: usize, delta: Vec<f64>) {
    match &mut grads[index] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let a_rc = a[r * k + c];
            if a_rc == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *o += a_rc * bv;
            }
        }
    }
    out
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct GradientMap {
    tape: u64,
    grads: HashMap<usize, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        if leaf.tape != self.tape {
            return None;
        }
        self.grads.get(&leaf.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Compare tape gradients with central differences.
///
/// `f` builds a scalar loss from leaves holding `leaves`. Returns the maximum
/// over all leaf entries of `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(f: F, leaves: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(GateError::InvalidArgument(format!(
            "epsilon must be in (0, 1e-2], got {epsilon}"
        )));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(GateError::NonFinite(format!("grad_check probe value {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.scalar(loss).is_finite() {
        return Err(GateError::NonFinite("grad_check base value".into()));
    }
    let grads = tape.backward(loss)?;

    let mut probe = leaves.to_vec();
    let mut worst = 0.0_f64;
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("registered leaf").data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = probe[li].data[j];
            probe[li].data[j] = orig + epsilon;
            let plus = eval(&probe)?;
            probe[li].data[j] = orig - epsilon;
            let minus = eval(&probe)?;
            probe[li].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_of_ones() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn mean_sq_diff_hand_value() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let l = tape.mean_sq_diff(a, b).unwrap();
        assert_eq!(tape.scalar(l), 12.5);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            GateError::ShapeMismatch { op, left, right } => {
                assert_eq!(op, "matmul");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.add(a, v), Err(GateError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn forward_dispatch_matches_methods() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, -2.0]));
        let b = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let s = tape.forward(OpKind::Sub, &[a, b], 0.0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, -2.5]);
        let k = tape.forward(OpKind::Scale, &[a], 3.0).unwrap();
        assert_eq!(tape.value(k).data(), &[3.0, -6.0]);
        assert!(tape.forward(OpKind::Add, &[a], 0.0).is_err());
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![3.0]));
        let one = tape.constant(Tensor::vector(vec![1.0]));
        let l = tape.mean_sq_diff(w, one).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[4.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![3.0]));
        let u = tape.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let l = tape.sum(w).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(u).unwrap(), &Tensor::zeros(vec![2, 2]));
    }

    #[test]
    fn linear_in_lambda() {
        let mut tape = Tape::new();
        let lam = [
            tape.leaf(Tensor::scalar(1.0)),
            tape.leaf(Tensor::scalar(1.0)),
        ];
        let c = [
            tape.constant(Tensor::scalar(2.0)),
            tape.constant(Tensor::scalar(5.0)),
        ];
        let t0 = tape.mul_scalar(c[0], lam[0]).unwrap();
        let t1 = tape.mul_scalar(c[1], lam[1]).unwrap();
        let l = tape.add(t0, t1).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(lam[0]).unwrap().data(), &[2.0]);
        assert_eq!(g.get(lam[1]).unwrap().data(), &[5.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(GateError::NonScalarLoss(_))));

        let mut other = Tape::new();
        let foreign = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(foreign), Err(GateError::NotOnTape(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::vector(vec![0.3, -0.7]));
        let lam = tape.leaf(Tensor::scalar(2.0));
        let f = tape.tanh(theta).unwrap();
        let fd = tape.detach(f).unwrap();
        assert_eq!(tape.value(fd), tape.value(f));
        let prod = tape.mul_scalar(fd, lam).unwrap();
        let l = tape.sum(prod).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(theta).unwrap().data(), &[0.0, 0.0]);
        let expected = 0.3_f64.tanh() + (-0.7_f64).tanh();
        assert!((g.get(lam).unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn detach_frozen_factor() {
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::scalar(7.0));
        let lam = tape.leaf(Tensor::scalar(0.4));
        let cd = tape.detach(c).unwrap();
        let l = tape.mul_scalar(cd, lam).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(lam).unwrap().data(), &[7.0]);
        assert_eq!(g.get(c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn multiple_consumers_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0]));
        let y = tape.add(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let l = tape.sum(z).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn grad_check_mean_sq_diff_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let leaves = vec![rand_tensor(&mut rng, vec![8]), rand_tensor(&mut rng, vec![8])];
        let err = grad_check(|t, v| t.mean_sq_diff(v[0], v[1]), &leaves, 1e-5).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let leaves = vec![Tensor::vector(vec![0.25, -1.5, 3.0])];
        let err = grad_check(
            |t, v| {
                let s = t.scale(v[0], 0.5)?;
                t.sum(s)
            },
            &leaves,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn grad_check_rejects_bad_epsilon() {
        let leaves = vec![Tensor::scalar(1.0)];
        assert!(grad_check(|t, v| t.sum(v[0]), &leaves, 0.0).is_err());
        assert!(grad_check(|t, v| t.sum(v[0]), &leaves, 0.1).is_err());
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let leaves = vec![Tensor::scalar(1e308)];
        let r = grad_check(
            |t, v| {
                let s = t.scale(v[0], 10.0)?;
                t.sum(s)
            },
            &leaves,
            1e-3,
        );
        assert!(matches!(r, Err(GateError::NonFinite(_))));
    }

    #[test]
    fn grad_check_mlp_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            rand_tensor(&mut rng, vec![5, 4]),
            rand_tensor(&mut rng, vec![4, 3]),
            rand_tensor(&mut rng, vec![1, 3]),
            rand_tensor(&mut rng, vec![5, 3]),
        ];
        let err = grad_check(
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add_bias(h, v[2])?;
                let h = t.tanh(h)?;
                let d = t.sub(h, v[3])?;
                let n = t.row_norm(d)?;
                let s = t.sum(n)?;
                let m = t.mean_sq_diff(h, v[3])?;
                let ms = t.mul_scalar(m, s)?;
                t.add(ms, s)
            },
            &leaves,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 5050.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    proptest! {
        #[test]
        fn gradient_of_sum_is_sum_of_gradients(
            a in proptest::collection::vec(-2.0f64..2.0, 6),
            b in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            let x = Tensor::vector(a);
            let target = Tensor::vector(b);
            let grad_of = |use_f: bool, use_g: bool| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone());
                let tv = tape.constant(target.clone());
                let f = tape.mean_sq_diff(xv, tv).unwrap();
                let th = tape.tanh(xv).unwrap();
                let g = tape.sum(th).unwrap();
                let l = match (use_f, use_g) {
                    (true, true) => tape.add(f, g).unwrap(),
                    (true, false) => f,
                    _ => g,
                };
                tape.backward(l).unwrap().get(xv).unwrap().clone()
            };
            let both = grad_of(true, true);
            let f = grad_of(true, false);
            let g = grad_of(false, true);
            for i in 0..6 {
                prop_assert!((both.data()[i] - (f.data()[i] + g.data()[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn tape_replay_is_bitwise(seed in 0u64..1000) {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = rand_tensor(&mut rng, vec![3, 2]);
                let x = rand_tensor(&mut rng, vec![4, 3]);
                let mut tape = Tape::new();
                let wv = tape.leaf(w);
                let xv = tape.constant(x);
                let h = tape.matmul(xv, wv).unwrap();
                let h = tape.tanh(h).unwrap();
                let l = tape.sum(h).unwrap();
                let g = tape.backward(l).unwrap();
                (tape.scalar(l).to_bits(), g.get(wv).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            };
            prop_assert_eq!(run(), run());
        }
    }
}
