//! The recording tape and its reverse pass.
//!
//! Every op appends a node holding its forward value and enough of its
//! inputs to compute vector-Jacobian products later. Values flow through
//! [`Var`] handles, which are plain indices into the tape.
//!
//! Shapes are row-major; "rows" means everything except the trailing
//! dimension. The only implicit broadcast is a trailing-shape operand
//! (e.g. a bias `[F]`) against a batch `[B, F]`.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParameterSet};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    Clamp(Var, f64, f64),
    Reshape(Var),
}

struct Node {
    /// `None` for parameters, whose values live in the borrowed set.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass worth of recorded operations.
pub struct Tape<'p> {
    params: Option<&'p ParameterSet>,
    nodes: Vec<Node>,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    /// A tape with no parameter set; differentiate through [`Tape::leaf`].
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
        }
    }
}

impl<'p> Tape<'p> {
    pub fn with_params(params: &'p ParameterSet) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn params(&self) -> Option<&'p ParameterSet> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .params
                .expect("parameter node on a tape without parameters")
                .get(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable input whose gradient can be read back with
    /// [`TapeGradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(
            self.params.is_some_and(|p| id.0 < p.len()),
            "parameter {id:?} not in this tape's parameter set"
        );
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value into a fresh constant; nothing flows back through it.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = matmul_forward(self.value(x), self.value(w))?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::MatMul(x, w), needs))
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let mut out = matmul_forward(self.value(x), self.value(w))?;
        let bias = self.value(b);
        if bias.shape() != [out.cols()] {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: out.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let n = out.cols();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Affine(x, w, b), needs))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_broadcast(op, ta, tb)?;
        let mut out = ta.clone();
        let n = tb.len();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = f(*o, tb.data()[i % n]);
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, c), needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let needs = self.needs(a);
        self.push(out, Op::AddScalar(a), needs)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(out, op, needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    /// Elementwise clamp; gradient passes only where the input is in range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |v| v.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.cols();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let needs = self.needs(a);
        self.push(out, Op::Softmax(a), needs)
    }

    /// Log-softmax over the trailing dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.cols();
        for row in out.data_mut().chunks_mut(n) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let needs = self.needs(a);
        self.push(out, Op::LogSoftmax(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.push(out, Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        let needs = self.needs(a);
        self.push(out, Op::Mean(a), needs)
    }

    /// Reduces the trailing dimension: `[B, F] -> [B]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let data: Vec<f64> = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        let shape = match t.rank() {
            0 | 1 => vec![],
            r => t.shape()[..r - 1].to_vec(),
        };
        let out = Tensor::new(shape, data).expect("sum_rows shape");
        let needs = self.needs(a);
        self.push(out, Op::SumRows(a), needs)
    }

    /// Concatenates along the trailing dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.value(parts[0]);
        let rows = first.rows();
        let lead: Vec<usize> = first.shape()[..first.rank().saturating_sub(1)].to_vec();
        let mut width = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != first.rank() || t.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            width += t.cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let out = Tensor::new(shape, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), needs))
    }

    /// Picks one entry per row: `out[r] = a[r, index[r]]`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        if t.rows() != index.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        let mut data = Vec::with_capacity(index.len());
        for (r, &i) in index.iter().enumerate() {
            if i >= n {
                return Err(Error::Index {
                    op: "gather",
                    index: i,
                    size: n,
                });
            }
            data.push(t.data()[r * n + i]);
        }
        let out = Tensor::vector(data);
        let needs = self.needs(a);
        Ok(self.push(out, Op::Gather(a, index.to_vec()), needs))
    }

    /// Selects (possibly repeated) rows: `out[i] = a[rows[i]]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (n, count) = (t.cols(), t.rows());
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= count {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: r,
                    size: count,
                });
            }
            data.extend_from_slice(t.row(r));
        }
        let shape = if t.rank() <= 1 {
            vec![rows.len()]
        } else {
            vec![rows.len(), n]
        };
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec()), needs))
    }

    /// Trailing-dimension slice `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        if start > end || end > n {
            return Err(Error::Index {
                op: "slice_cols",
                index: end,
                size: n,
            });
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("slice of a scalar") = end - start;
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::SliceCols(a, start, end), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), needs))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<TapeGradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut params = match self.params {
            Some(p) => Gradients::zeros_like(p),
            None => Gradients::zeros_like(&ParameterSet::new()),
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Param(id) => {
                    params.accumulate(*id, &g);
                }
                Op::Leaf => {}
                _ => self.propagate(i, &g, &mut grads),
            }
            grads[i] = Some(g);
        }
        Ok(TapeGradients {
            params,
            nodes: grads,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.as_ref().expect("computed node");
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(x, w) | Op::Affine(x, w, _) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let k = tw.shape()[0];
                let n = tw.shape()[1];
                let m = tx.len() / k;
                if self.needs(*x) {
                    let dx = slot(grads, *x, tx.len());
                    // dX[m,k] += dY[m,n] * W^T
                    unsafe {
                        matrixmultiply::dgemm(
                            m,
                            n,
                            k,
                            1.0,
                            g.as_ptr(),
                            n as isize,
                            1,
                            tw.data().as_ptr(),
                            1,
                            n as isize,
                            1.0,
                            dx.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                }
                if self.needs(*w) {
                    let dw = slot(grads, *w, tw.len());
                    // dW[k,n] += X^T * dY
                    unsafe {
                        matrixmultiply::dgemm(
                            k,
                            m,
                            n,
                            1.0,
                            tx.data().as_ptr(),
                            1,
                            k as isize,
                            g.as_ptr(),
                            n as isize,
                            1,
                            1.0,
                            dw.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                }
                if let Op::Affine(_, _, b) = &node.op {
                    if self.needs(*b) {
                        let db = slot(grads, *b, n);
                        for row in g.chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.needs(*a) {
                    add_into(slot(grads, *a, g.len()), g, 1.0);
                }
                if self.needs(*b) {
                    let nb = self.value(*b).len();
                    let db = slot(grads, *b, nb);
                    for (j, v) in g.iter().enumerate() {
                        db[j % nb] += sign * v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let nb = tb.len();
                if self.needs(*a) {
                    let da = slot(grads, *a, g.len());
                    for (j, v) in g.iter().enumerate() {
                        da[j] += v * tb.data()[j % nb];
                    }
                }
                if self.needs(*b) {
                    let db = slot(grads, *b, nb);
                    for (j, v) in g.iter().enumerate() {
                        db[j % nb] += v * ta.data()[j];
                    }
                }
            }
            Op::Scale(a, c) => add_into(slot(grads, *a, g.len()), g, *c),
            Op::AddScalar(a) | Op::Reshape(a) => add_into(slot(grads, *a, g.len()), g, 1.0),
            Op::Tanh(a) => {
                let da = slot(grads, *a, g.len());
                for ((d, v), y) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += v * (1.0 - y * y);
                }
            }
            Op::Relu(a) => {
                let da = slot(grads, *a, g.len());
                for ((d, v), y) in da.iter_mut().zip(g).zip(out.data()) {
                    if *y > 0.0 {
                        *d += v;
                    }
                }
            }
            Op::Exp(a) => {
                let da = slot(grads, *a, g.len());
                for ((d, v), y) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += v * y;
                }
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let da = slot(grads, *a, g.len());
                for ((d, v), xv) in da.iter_mut().zip(g).zip(x) {
                    *d += 2.0 * v * xv;
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let da = slot(grads, *a, g.len());
                for ((d, v), xv) in da.iter_mut().zip(g).zip(x) {
                    if *xv >= *lo && *xv <= *hi {
                        *d += v;
                    }
                }
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let da = slot(grads, *a, g.len());
                for ((drow, grow), yrow) in
                    da.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(gv, y)| gv * y).sum();
                    for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (gv - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let n = out.cols();
                let da = slot(grads, *a, g.len());
                for ((drow, grow), yrow) in
                    da.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n))
                {
                    let total: f64 = grow.iter().sum();
                    for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += gv - y.exp() * total;
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                for d in slot(grads, *a, n).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let v = g[0] / n.max(1) as f64;
                for d in slot(grads, *a, n).iter_mut() {
                    *d += v;
                }
            }
            Op::SumRows(a) => {
                let t = self.value(*a);
                let n = t.cols();
                let da = slot(grads, *a, t.len());
                for (drow, gv) in da.chunks_mut(n).zip(g) {
                    for d in drow.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Concat(parts) => {
                let width = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let pw = t.cols();
                    if self.needs(p) {
                        let dp = slot(grads, p, t.len());
                        for (drow, grow) in dp.chunks_mut(pw).zip(g.chunks(width)) {
                            add_into(drow, &grow[offset..offset + pw], 1.0);
                        }
                    }
                    offset += pw;
                }
            }
            Op::Gather(a, index) => {
                let t = self.value(*a);
                let n = t.cols();
                let da = slot(grads, *a, t.len());
                for (r, (&i, gv)) in index.iter().zip(g).enumerate() {
                    da[r * n + i] += gv;
                }
            }
            Op::GatherRows(a, rows) => {
                let t = self.value(*a);
                let n = t.cols();
                let da = slot(grads, *a, t.len());
                for (&r, grow) in rows.iter().zip(g.chunks(n)) {
                    add_into(&mut da[r * n..(r + 1) * n], grow, 1.0);
                }
            }
            Op::SliceCols(a, start, end) => {
                let t = self.value(*a);
                let n = t.cols();
                let w = end - start;
                let da = slot(grads, *a, t.len());
                for (drow, grow) in da.chunks_mut(n).zip(g.chunks(w)) {
                    add_into(&mut drow[*start..*end], grow, 1.0);
                }
            }
        }
    }
}

/// Gradients from one reverse pass.
pub struct TapeGradients {
    params: Gradients,
    nodes: Vec<Option<Vec<f64>>>,
}

impl TapeGradients {
    /// Gradient with respect to any recorded value (zeros if unreached).
    pub fn wrt(&self, tape: &Tape<'_>, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match self.nodes.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

/// Gradient of a scalar `loss` with respect to every parameter of the tape's
/// set; unreachable parameters get zeros.
pub fn grad(tape: &Tape<'_>, loss: Var) -> Result<Gradients> {
    Ok(tape.backward(loss)?.into_params())
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let ok =
        a.shape() == b.shape() || (a.rank() >= 1 && b.shape() == &a.shape()[1..] && b.rank() >= 1);
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn matmul_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || x.rank() == 0 || x.cols() != w.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let m = x.len() / k;
    let mut out = vec![0.0; m * n];
    // SAFETY: the pointers cover m*k, k*n and m*n contiguous row-major
    // elements respectively, matching the dimensions and strides passed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            x.data().as_ptr(),
            k as isize,
            1,
            w.data().as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    let mut shape = x.shape()[..x.rank() - 1].to_vec();
    shape.push(n);
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn tanh_of_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.tanh(x);
        assert_eq!(t.value(y).item(), Some(0.0));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.softmax(x);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn derivative_of_square_product() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(&t, x).item(), Some(6.0));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let s = t.stop_gradient(x);
        let y = t.mul(s, x).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        // only the direct path contributes: d/dx (c * x) = c
        assert_eq!(g.wrt(&t, x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn bias_broadcast_over_rows() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(Tensor::vector(vec![10.0, 20.0]));
        let y = t.add(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(&t, b).data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient_and_others_zero() {
        let mut p = ParameterSet::new();
        let used = p.insert("p", Tensor::vector(vec![0.1, 0.2, 0.3])).unwrap();
        let unused = p.insert("q", Tensor::vector(vec![5.0])).unwrap();
        let mut t = Tape::with_params(&p);
        let v = t.param(used);
        let l = t.sum(v);
        let g = grad(&t, l).unwrap();
        assert_eq!(g.get(used).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.get(unused).data(), &[0.0]);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 3.0, 3.0]).unwrap());
        let a = t.log_softmax(x);
        let b = t.softmax(x);
        for (la, pb) in t.value(a).data().iter().zip(t.value(b).data()) {
            assert!(close(*la, pb.ln()));
        }
    }

    #[test]
    fn relu_zeroes_negatives_and_their_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(&t, x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn gather_rows_scatters_back() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(&t, x).data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn gather_out_of_range() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.gather(x, &[2]), Err(Error::Index { .. })));
    }
}
