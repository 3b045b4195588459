//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive as it is evaluated. Values are
//! computed eagerly; [`Tape::backward`] then walks the record in reverse and
//! accumulates vector-Jacobian products into every leaf that was created
//! with `requires_grad`. Each op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of propagating garbage.
//!
//! ```
//! use radar::numerics::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::column(vec![1.0, 2.0]));
//! let sq = tape.square(x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use crate::error::{contract, shape_err, Result};
use crate::numerics::par;
use crate::numerics::sparse::{spmm_kernel, spmm_value_grad, SparsePattern};
use crate::numerics::tensor::{dot, matmul_into, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softplus,
    LogSigmoid,
    Relu,
    LeakyRelu(f64),
    Square,
    Sqrt,
    Clamp(f64, f64),
}

enum Op {
    Leaf,
    Unary(Var, Unary),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Spmm {
        pattern: Arc<SparsePattern>,
        values: Var,
        x: Var,
        transpose: bool,
    },
    GatherRows(Var, Arc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumAll(Var),
    SumRows(Var),
    RowDot(Var, Var),
    NormalizeRows(Var, f64),
    LogSumExpRows(Var, Option<Arc<Vec<bool>>>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    requires_grad: bool,
}

/// Recorder for one forward/backward pass. Single owner; not `Sync`.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Moves the gradient out, leaving `None`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Softplus => "softplus",
            Unary::LogSigmoid => "log_sigmoid",
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Clamp(..) => "clamp",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::LogSigmoid => -softplus(-x),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Softplus => sigmoid(x),
            Unary::LogSigmoid => sigmoid(-x),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Clamp(lo, hi) => {
                if x > lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match &op {
            Op::Leaf => false,
            other => op_inputs(other).iter().any(|v| nodes[v.0].needs_grad),
        };
        nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad: false,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf whose gradient is returned by [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_const(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of `v`'s current value as a new constant; gradients stop here.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Value of a scalar node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn unary(&self, a: Var, kind: Unary) -> Result<Var> {
        let out = self.value(a).map(|x| kind.apply(x));
        self.push(out, Op::Unary(a, kind), kind.name())
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Neg)
    }
    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }
    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }
    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }
    /// `ln σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::LogSigmoid)
    }
    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }
    pub fn leaky_relu(&self, a: Var, slope: f64) -> Result<Var> {
        self.unary(a, Unary::LeakyRelu(slope))
    }
    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, Unary::Clamp(lo, hi))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// `a[n×d] + b[1×d]`, broadcasting `b` over rows.
    pub fn add_row(&self, a: Var, b: Var) -> Result<Var> {
        let ([n, d], sb) = (self.shape(a), self.shape(b));
        if sb != [1, d] {
            return shape_err("add_row", format!("{:?} + {sb:?}", [n, d]));
        }
        let mut out = self.value(a).clone();
        {
            let bv = self.value(b);
            for i in 0..n {
                for (o, &x) in out.row_mut(i).iter_mut().zip(bv.data()) {
                    *o += x;
                }
            }
        }
        self.push(out, Op::AddRow(a, b), "add_row")
    }

    /// `a[n×d] * c[n×1]`, scaling each row of `a`.
    pub fn mul_col(&self, a: Var, c: Var) -> Result<Var> {
        let ([n, d], sc) = (self.shape(a), self.shape(c));
        if sc != [n, 1] {
            return shape_err("mul_col", format!("{:?} * {sc:?}", [n, d]));
        }
        let mut out = self.value(a).clone();
        {
            let cv = self.value(c);
            for i in 0..n {
                let s = cv.data()[i];
                out.row_mut(i).iter_mut().for_each(|o| *o *= s);
            }
        }
        self.push(out, Op::MulCol(a, c), "mul_col")
    }

    /// `a * s` for a `1 × 1` node `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1, 1] {
            return shape_err("mul_scalar", format!("{:?} is not scalar", self.shape(s)));
        }
        let sv = self.item(s)?;
        let out = self.value(a).scaled(sv);
        self.push(out, Op::MulScalar(a, s), "mul_scalar")
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scaled(c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let ([n, k], [m, k2]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return shape_err("matmul_nt", format!("{:?} x {:?}ᵀ", [n, k], [m, k2]));
        }
        let out = {
            let (ar, br) = (self.value(a), self.value(b));
            let (av, bv): (&Tensor, &Tensor) = (&ar, &br);
            let mut out = Tensor::zeros(n, m);
            par::for_each_row(out.data_mut(), m, |i, row| {
                let ar = av.row(i);
                for (j, o) in row.iter_mut().enumerate() {
                    *o = dot(ar, bv.row(j));
                }
            });
            out
        };
        self.push(out, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    /// Sparse-dense product with differentiable values: `A·x`, or `Aᵀ·x` when
    /// `transpose`. `values` is an `nnz × 1` column in pattern storage order.
    pub fn spmm(&self, pattern: &Arc<SparsePattern>, values: Var, x: Var, transpose: bool) -> Result<Var> {
        if self.shape(values) != [pattern.nnz(), 1] {
            return shape_err(
                "spmm",
                format!("values {:?} for {} entries", self.shape(values), pattern.nnz()),
            );
        }
        let (out_rows, inner) = if transpose {
            (pattern.cols(), pattern.rows())
        } else {
            (pattern.rows(), pattern.cols())
        };
        let [xr, d] = self.shape(x);
        if xr != inner {
            return shape_err(
                "spmm",
                format!("sparse {}x{} (transpose={transpose}) times {:?}", pattern.rows(), pattern.cols(), [xr, d]),
            );
        }
        let mut out = Tensor::zeros(out_rows, d);
        spmm_kernel(
            pattern,
            self.value(values).data(),
            self.value(x).data(),
            d,
            transpose,
            out.data_mut(),
            false,
        );
        self.push(
            out,
            Op::Spmm {
                pattern: Arc::clone(pattern),
                values,
                x,
                transpose,
            },
            "spmm",
        )
    }

    pub fn gather_rows(&self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let n = self.shape(a)[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return shape_err("gather_rows", format!("row {bad} of {n}"));
        }
        let out = self.value(a).gather_rows(&idx);
        self.push(out, Op::GatherRows(a, idx), "gather_rows")
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat_cols needs at least one input");
        };
        let n = self.shape(first)[0];
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        if parts.iter().any(|&p| self.shape(p)[0] != n) {
            return shape_err("concat_cols", "row counts differ");
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(n, total);
        {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            for i in 0..n {
                let row = out.row_mut(i);
                let mut off = 0;
                for (v, &w) in vals.iter().zip(&widths) {
                    row[off..off + w].copy_from_slice(v.row(i));
                    off += w;
                }
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Stacks equally wide inputs on top of each other.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat_rows needs at least one input");
        };
        let d = self.shape(first)[1];
        if parts.iter().any(|&p| self.shape(p)[1] != d) {
            return shape_err("concat_rows", "column counts differ");
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(rows, d, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return contract("mean of an empty tensor");
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Row sums as an `n × 1` column.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let sums = (0..v.rows()).map(|i| v.row(i).iter().sum()).collect();
        drop(v);
        self.push(Tensor::column(sums), Op::SumRows(a), "sum_rows")
    }

    /// Row-wise inner products of two equally shaped matrices.
    pub fn row_dot(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            Tensor::column((0..av.rows()).map(|i| dot(av.row(i), bv.row(i))).collect())
        };
        self.push(out, Op::RowDot(a, b), "row_dot")
    }

    /// Divides every row by `max(‖row‖₂, floor)`.
    pub fn normalize_rows(&self, a: Var, floor: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let r = out.row_mut(i);
            let n = dot(r, r).sqrt().max(floor);
            r.iter_mut().for_each(|x| *x /= n);
        }
        self.push(out, Op::NormalizeRows(a, floor), "normalize_rows")
    }

    /// Row-wise `log Σ_j exp(x_ij)`, shifted by the row max. With a mask only
    /// entries whose flag is `true` take part; every row needs one.
    pub fn logsumexp_rows(&self, a: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let v = self.value(a);
        let [n, m] = v.shape();
        if let Some(mk) = &mask {
            if mk.len() != n * m {
                return shape_err("logsumexp_rows", "mask size differs from input");
            }
        }
        let keep = |i: usize, j: usize| mask.as_ref().is_none_or(|mk| mk[i * m + j]);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = v.row(i);
            let max = (0..m)
                .filter(|&j| keep(i, j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return contract(format!("logsumexp_rows: row {i} has no entries"));
            }
            let s: f64 = (0..m)
                .filter(|&j| keep(i, j))
                .map(|j| (row[j] - max).exp())
                .sum();
            out.push(max + s.ln());
        }
        drop(v);
        self.push(Tensor::column(out), Op::LogSumExpRows(a, mask), "logsumexp_rows")
    }

    /// Reverse pass from the scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.into_inner();
        if loss.0 >= nodes.len() {
            return contract("loss is not recorded on this tape");
        }
        if nodes[loss.0].value.len() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(1, 1));

        for id in (0..=loss.0).rev() {
            if !nodes[id].needs_grad || matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads)?;
        }

        let mut out: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad {
                let [r, c] = node.value.shape();
                let g = grads[id].take().unwrap_or_else(|| Tensor::zeros(r, c));
                g.ensure_finite("backward")?;
                out[id] = Some(g);
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Unary(a, _)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Transpose(a)
        | Op::GatherRows(a, _)
        | Op::SumAll(a)
        | Op::SumRows(a)
        | Op::NormalizeRows(a, _)
        | Op::LogSumExpRows(a, _) => vec![*a],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::MulCol(a, b)
        | Op::MulScalar(a, b)
        | Op::MatMul(a, b)
        | Op::MatMulNt(a, b)
        | Op::RowDot(a, b) => vec![*a, *b],
        Op::Spmm { values, x, .. } => vec![*values, *x],
        Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    if !nodes[v.0].needs_grad {
        return Ok(());
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign_scaled(&g, 1.0),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].needs_grad;
    let y = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Unary(a, kind) => {
            let x = val(*a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&gi, &xi), &yi)| gi * kind.derivative(xi, yi))
                .collect();
            accumulate(nodes, grads, *a, Tensor::from_vec(x.rows(), x.cols(), data)?)?;
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.scaled(-1.0))?;
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(nodes, grads, *a, g.zip_map(val(*b), |p, q| p * q)?)?;
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, g.zip_map(val(*a), |p, q| p * q)?)?;
            }
        }
        Op::AddRow(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            if needs(*b) {
                let d = g.cols();
                let mut gb = Tensor::zeros(1, d);
                for i in 0..g.rows() {
                    for (o, &x) in gb.data_mut().iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                accumulate(nodes, grads, *b, gb)?;
            }
        }
        Op::MulCol(a, c) => {
            let (av, cv) = (val(*a), val(*c));
            if needs(*a) {
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let s = cv.data()[i];
                    ga.row_mut(i).iter_mut().for_each(|o| *o *= s);
                }
                accumulate(nodes, grads, *a, ga)?;
            }
            if needs(*c) {
                let gc = (0..g.rows()).map(|i| dot(g.row(i), av.row(i))).collect();
                accumulate(nodes, grads, *c, Tensor::column(gc))?;
            }
        }
        Op::MulScalar(a, s) => {
            let sv = val(*s).data()[0];
            if needs(*a) {
                accumulate(nodes, grads, *a, g.scaled(sv))?;
            }
            if needs(*s) {
                accumulate(nodes, grads, *s, Tensor::scalar(dot(g.data(), val(*a).data())))?;
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.scaled(*c))?,
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone())?,
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let [n, k] = av.shape();
            let m = bv.cols();
            if needs(*a) {
                // g[n×m] · bᵀ[m×k]
                let bt = bv.transpose();
                let mut ga = Tensor::zeros(n, k);
                matmul_into(g.data(), bt.data(), n, m, k, ga.data_mut());
                accumulate(nodes, grads, *a, ga)?;
            }
            if needs(*b) {
                // aᵀ[k×n] · g[n×m]
                let at = av.transpose();
                let mut gb = Tensor::zeros(k, m);
                matmul_into(at.data(), g.data(), k, n, m, gb.data_mut());
                accumulate(nodes, grads, *b, gb)?;
            }
        }
        Op::MatMulNt(a, b) => {
            // y = a bᵀ; ga = g b; gb = gᵀ a
            let (av, bv) = (val(*a), val(*b));
            let [n, k] = av.shape();
            let m = bv.rows();
            if needs(*a) {
                let mut ga = Tensor::zeros(n, k);
                matmul_into(g.data(), bv.data(), n, m, k, ga.data_mut());
                accumulate(nodes, grads, *a, ga)?;
            }
            if needs(*b) {
                let gt = g.transpose();
                let mut gb = Tensor::zeros(m, k);
                matmul_into(gt.data(), av.data(), m, n, k, gb.data_mut());
                accumulate(nodes, grads, *b, gb)?;
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose())?,
        Op::Spmm {
            pattern,
            values,
            x,
            transpose,
        } => {
            let (vv, xv) = (val(*values), val(*x));
            let d = xv.cols();
            if needs(*x) {
                let mut gx = Tensor::zeros(xv.rows(), d);
                spmm_kernel(pattern, vv.data(), g.data(), d, !transpose, gx.data_mut(), false);
                accumulate(nodes, grads, *x, gx)?;
            }
            if needs(*values) {
                let gv = spmm_value_grad(pattern, g.data(), xv.data(), d, *transpose);
                accumulate(nodes, grads, *values, Tensor::column(gv))?;
            }
        }
        Op::GatherRows(a, idx) => {
            let av = val(*a);
            let mut ga = Tensor::zeros(av.rows(), av.cols());
            for (k, &i) in idx.iter().enumerate() {
                for (o, &x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                    *o += x;
                }
            }
            accumulate(nodes, grads, *a, ga)?;
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for &p in parts {
                let w = val(p).cols();
                if needs(p) {
                    let mut gp = Tensor::zeros(g.rows(), w);
                    for i in 0..g.rows() {
                        gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                    }
                    accumulate(nodes, grads, p, gp)?;
                }
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let d = g.cols();
            let mut off = 0;
            for &p in parts {
                let r = val(p).rows();
                if needs(p) {
                    let gp = Tensor::from_vec(r, d, g.data()[off * d..(off + r) * d].to_vec())?;
                    accumulate(nodes, grads, p, gp)?;
                }
                off += r;
            }
        }
        Op::SumAll(a) => {
            let [r, c] = val(*a).shape();
            accumulate(nodes, grads, *a, Tensor::full(r, c, g.data()[0]))?;
        }
        Op::SumRows(a) => {
            let [r, c] = val(*a).shape();
            let mut ga = Tensor::zeros(r, c);
            for i in 0..r {
                ga.row_mut(i).fill(g.data()[i]);
            }
            accumulate(nodes, grads, *a, ga)?;
        }
        Op::RowDot(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let mut ga = bv.clone();
                for i in 0..ga.rows() {
                    let s = g.data()[i];
                    ga.row_mut(i).iter_mut().for_each(|o| *o *= s);
                }
                accumulate(nodes, grads, *a, ga)?;
            }
            if needs(*b) {
                let mut gb = av.clone();
                for i in 0..gb.rows() {
                    let s = g.data()[i];
                    gb.row_mut(i).iter_mut().for_each(|o| *o *= s);
                }
                accumulate(nodes, grads, *b, gb)?;
            }
        }
        Op::NormalizeRows(a, floor) => {
            let av = val(*a);
            let mut ga = Tensor::zeros(av.rows(), av.cols());
            for i in 0..av.rows() {
                let x = av.row(i);
                let norm = dot(x, x).sqrt();
                let gi = g.row(i);
                let out = ga.row_mut(i);
                if norm > *floor {
                    let yi = y.row(i);
                    let proj = dot(yi, gi);
                    for j in 0..x.len() {
                        out[j] = (gi[j] - yi[j] * proj) / norm;
                    }
                } else {
                    for j in 0..x.len() {
                        out[j] = gi[j] / floor;
                    }
                }
            }
            accumulate(nodes, grads, *a, ga)?;
        }
        Op::LogSumExpRows(a, mask) => {
            let av = val(*a);
            let m = av.cols();
            let mut ga = Tensor::zeros(av.rows(), m);
            for i in 0..av.rows() {
                let lse = y.data()[i];
                let gi = g.data()[i];
                let row = av.row(i);
                let out = ga.row_mut(i);
                for j in 0..m {
                    if mask.as_ref().is_none_or(|mk| mk[i * m + j]) {
                        out[j] = gi * (row[j] - lse).exp();
                    }
                }
            }
            accumulate(nodes, grads, *a, ga)?;
        }
    }
    Ok(())
}
