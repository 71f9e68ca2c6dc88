use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// `n x k` plus a `1 x k` row repeated over every row.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `n x k` times an `n x 1` column repeated over every column.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Row sums, `n x k -> n x 1`.
    SumRows(Var),
    /// Column sums, `n x k -> 1 x k`.
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    Ln(Var),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SquaredNorm(Var),
    /// Concatenation along the column axis.
    Concat(Vec<Var>),
    /// Concatenation along the row axis.
    VStack(Vec<Var>),
    /// Row-wise outer product flattened as `out[r, i*b + j] = x[r, i] * y[r, j]`.
    RowOuter(Var, Var),
    SelectRows(Var, Vec<usize>),
    SelectCol(Var, usize),
    Clamp(Var, f64, f64),
    /// Cuts the tape: treated as a constant on the way back.
    StopGrad,
    GradReverse(Var, f64),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// True when some differentiable leaf is reachable through this node.
    tracked: bool,
    grad: Option<Tensor>,
}

/// Define-by-run tape of forward operations.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and the reverse of insertion order is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn row_log_softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v = *v - max - lse;
        }
    }
    out
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

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros(value.rows(), value.cols()));
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            tracked: requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let tracked = match &op {
            Op::Leaf => unreachable!(),
            Op::StopGrad => false,
            Op::Concat(vs) | Op::VStack(vs) => vs.iter().any(|v| self.nodes[v.0].tracked),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulCol(a, b)
            | Op::RowOuter(a, b) => self.nodes[a.0].tracked || self.nodes[b.0].tracked,
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Ln(a)
            | Op::Exp(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::SquaredNorm(a)
            | Op::SelectRows(a, _)
            | Op::SelectCol(a, _)
            | Op::Clamp(a, _, _)
            | Op::GradReverse(a, _) => self.nodes[a.0].tracked,
        };
        self.nodes.push(Node {
            op,
            value,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: x.shape(),
                right: r.shape(),
            });
        }
        let mut out = x.clone();
        let cols = x.cols();
        for chunk in out.data_mut().chunks_mut(cols.max(1)) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRow(a, row), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (x, c) = (self.value(a), self.value(col));
        if c.cols() != 1 || c.rows() != x.rows() {
            return Err(Error::Shape {
                op: "mul_col",
                left: x.shape(),
                right: c.shape(),
            });
        }
        let mut out = x.clone();
        let cols = x.cols();
        for (chunk, s) in out.data_mut().chunks_mut(cols.max(1)).zip(c.data()) {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(Op::MulCol(a, col), out))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), out)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), out)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sums = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        self.push(Op::SumRows(a), Tensor::column_vector(sums))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut sums = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (s, v) in sums.iter_mut().zip(x.row(r)) {
                *s += v;
            }
        }
        self.push(Op::SumCols(a), Tensor::row_vector(sums))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let m = x.sum() / x.len() as f64;
        Ok(self.push(Op::Mean(a), Tensor::scalar(m)))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::numeric("ln", format!("input {bad} outside (0, inf)")));
        }
        let out = x.map(f64::ln);
        Ok(self.push(Op::Ln(a), out))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    /// Softmax over each row, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.is_finite() {
            return Err(Error::numeric("softmax", "non-finite logits"));
        }
        let out = row_softmax(x);
        Ok(self.push(Op::Softmax(a), out))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.is_finite() {
            return Err(Error::numeric("log_softmax", "non-finite logits"));
        }
        let out = row_log_softmax(x);
        Ok(self.push(Op::LogSoftmax(a), out))
    }

    /// Squared Frobenius norm.
    pub fn squared_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).squared_norm();
        self.push(Op::SquaredNorm(a), Tensor::scalar(s))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(Error::Shape {
                    op: "concat",
                    left: self.value(*first).shape(),
                    right: self.value(*p).shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), out))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("vstack of zero tensors"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let x = self.value(*p);
            if x.cols() != cols {
                return Err(Error::Shape {
                    op: "vstack",
                    left: self.value(*first).shape(),
                    right: x.shape(),
                });
            }
            rows += x.rows();
            data.extend_from_slice(x.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(Op::VStack(parts.to_vec()), out))
    }

    /// Per-row outer product of `x` (`n x a`) and `y` (`n x b`), flattened
    /// so that column `i*b + j` holds `x[r, i] * y[r, j]`.
    pub fn row_outer(&mut self, x: Var, y: Var) -> Result<Var> {
        let (a, b) = (self.value(x), self.value(y));
        if a.rows() != b.rows() {
            return Err(Error::Shape {
                op: "row_outer",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let (n, da, db) = (a.rows(), a.cols(), b.cols());
        let mut data = Vec::with_capacity(n * da * db);
        for r in 0..n {
            for &xi in a.row(r) {
                for &yj in b.row(r) {
                    data.push(xi * yj);
                }
            }
        }
        let out = Tensor::new(n, da * db, data)?;
        Ok(self.push(Op::RowOuter(x, y), out))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::contract(format!(
                "select_rows index {bad} out of range for {} rows",
                x.rows()
            )));
        }
        let out = x.select_rows(idx);
        Ok(self.push(Op::SelectRows(a, idx.to_vec()), out))
    }

    pub fn select_col(&mut self, a: Var, col: usize) -> Result<Var> {
        let x = self.value(a);
        if col >= x.cols() {
            return Err(Error::contract(format!(
                "select_col {col} out of range for {} columns",
                x.cols()
            )));
        }
        let vals = (0..x.rows()).map(|r| x.get(r, col)).collect();
        Ok(self.push(Op::SelectCol(a, col), Tensor::column_vector(vals)))
    }

    /// Elementwise clamp; the gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), out)
    }

    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(Op::StopGrad, out)
    }

    /// Identity forward; backward multiplies the upstream gradient by `-scale`.
    pub fn grad_reverse(&mut self, a: Var, scale: f64) -> Result<Var> {
        if !scale.is_finite() {
            return Err(Error::numeric("grad_reverse", format!("scale {scale}")));
        }
        let out = self.value(a).clone();
        Ok(self.push(Op::GradReverse(a, scale), out))
    }

    /// Reverse-mode sweep from a scalar root. Gradients of `requires_grad`
    /// leaves accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::contract("backward root is not in this graph"));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(up) = grads[id].take() else { continue };
            if !self.nodes[id].tracked {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                if let Some(acc) = self.nodes[id].grad.as_mut() {
                    acc.add_assign(&up);
                }
                continue;
            }
            self.propagate(id, &up, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut send = |v: Var, g: Tensor| {
            if !nodes[v.0].tracked {
                return;
            }
            match grads[v.0].as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads[v.0] = Some(g),
            }
        };
        let out = &nodes[id].value;

        match &nodes[id].op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                if nodes[a.0].tracked {
                    send(*a, up.matmul_nt(val(*b)));
                }
                if nodes[b.0].tracked {
                    send(*b, val(*a).matmul_tn(up));
                }
            }
            Op::Transpose(a) => send(*a, up.transpose()),
            Op::Add(a, b) => {
                send(*a, up.clone());
                send(*b, up.clone());
            }
            Op::AddRow(a, row) => {
                send(*a, up.clone());
                if nodes[row.0].tracked {
                    let mut g = vec![0.0; up.cols()];
                    for r in 0..up.rows() {
                        for (s, v) in g.iter_mut().zip(up.row(r)) {
                            *s += v;
                        }
                    }
                    send(*row, Tensor::row_vector(g));
                }
            }
            Op::Sub(a, b) => {
                send(*a, up.clone());
                send(*b, up.map(|v| -v));
            }
            Op::Mul(a, b) => {
                send(*a, up.zip_map(val(*b), |g, y| g * y));
                send(*b, up.zip_map(val(*a), |g, x| g * x));
            }
            Op::MulCol(a, col) => {
                let (x, c) = (val(*a), val(*col));
                if nodes[a.0].tracked {
                    let mut g = up.clone();
                    let cols = g.cols();
                    for (chunk, s) in g.data_mut().chunks_mut(cols.max(1)).zip(c.data()) {
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    send(*a, g);
                }
                if nodes[col.0].tracked {
                    let g = (0..x.rows())
                        .map(|r| x.row(r).iter().zip(up.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    send(*col, Tensor::column_vector(g));
                }
            }
            Op::Scale(a, s) => send(*a, up.map(|v| v * s)),
            Op::AddScalar(a) => send(*a, up.clone()),
            Op::SumRows(a) => {
                let x = val(*a);
                let mut g = Tensor::zeros(x.rows(), x.cols());
                let cols = x.cols();
                for (chunk, s) in g.data_mut().chunks_mut(cols.max(1)).zip(up.data()) {
                    chunk.iter_mut().for_each(|v| *v = *s);
                }
                send(*a, g);
            }
            Op::SumCols(a) => {
                let x = val(*a);
                let mut g = Tensor::zeros(x.rows(), x.cols());
                let cols = x.cols();
                for chunk in g.data_mut().chunks_mut(cols.max(1)) {
                    chunk.copy_from_slice(up.data());
                }
                send(*a, g);
            }
            Op::Sum(a) => {
                let x = val(*a);
                send(*a, Tensor::full(x.rows(), x.cols(), up.data()[0]));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let g = up.data()[0] / x.len() as f64;
                send(*a, Tensor::full(x.rows(), x.cols(), g));
            }
            Op::Ln(a) => send(*a, up.zip_map(val(*a), |g, x| g / x)),
            Op::Exp(a) => send(*a, up.zip_map(out, |g, y| g * y)),
            Op::Sigmoid(a) => send(*a, up.zip_map(out, |g, y| g * y * (1.0 - y))),
            Op::Tanh(a) => send(*a, up.zip_map(out, |g, y| g * (1.0 - y * y))),
            Op::Relu(a) => send(
                *a,
                up.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::Softmax(a) => {
                let mut g = up.clone();
                let cols = g.cols();
                for (r, chunk) in g.data_mut().chunks_mut(cols.max(1)).enumerate() {
                    let s = out.row(r);
                    let dot: f64 = chunk.iter().zip(s).map(|(u, p)| u * p).sum();
                    for (v, p) in chunk.iter_mut().zip(s) {
                        *v = p * (*v - dot);
                    }
                }
                send(*a, g);
            }
            Op::LogSoftmax(a) => {
                let mut g = up.clone();
                let cols = g.cols();
                for (r, chunk) in g.data_mut().chunks_mut(cols.max(1)).enumerate() {
                    let total: f64 = chunk.iter().sum();
                    for (v, ls) in chunk.iter_mut().zip(out.row(r)) {
                        *v -= ls.exp() * total;
                    }
                }
                send(*a, g);
            }
            Op::SquaredNorm(a) => {
                let s = up.data()[0];
                send(*a, val(*a).map(|x| 2.0 * x * s));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let x = val(*p);
                    let w = x.cols();
                    if nodes[p.0].tracked {
                        let mut data = Vec::with_capacity(x.len());
                        for r in 0..up.rows() {
                            data.extend_from_slice(&up.row(r)[offset..offset + w]);
                        }
                        send(*p, Tensor::new(x.rows(), w, data).expect("concat slice"));
                    }
                    offset += w;
                }
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for p in parts {
                    let x = val(*p);
                    let n = x.len();
                    if nodes[p.0].tracked {
                        let data = up.data()[offset..offset + n].to_vec();
                        send(*p, Tensor::new(x.rows(), x.cols(), data).expect("vstack slice"));
                    }
                    offset += n;
                }
            }
            Op::RowOuter(x, y) => {
                let (a, b) = (val(*x), val(*y));
                let (da, db) = (a.cols(), b.cols());
                if nodes[x.0].tracked {
                    let mut g = Tensor::zeros(a.rows(), da);
                    for r in 0..a.rows() {
                        let u = up.row(r);
                        for i in 0..da {
                            let v = (0..db).map(|j| u[i * db + j] * b.get(r, j)).sum();
                            g.set(r, i, v);
                        }
                    }
                    send(*x, g);
                }
                if nodes[y.0].tracked {
                    let mut g = Tensor::zeros(b.rows(), db);
                    for r in 0..b.rows() {
                        let u = up.row(r);
                        for j in 0..db {
                            let v = (0..da).map(|i| u[i * db + j] * a.get(r, i)).sum();
                            g.set(r, j, v);
                        }
                    }
                    send(*y, g);
                }
            }
            Op::SelectRows(a, idx) => {
                let x = val(*a);
                let mut g = Tensor::zeros(x.rows(), x.cols());
                let cols = x.cols();
                for (k, &i) in idx.iter().enumerate() {
                    let src = up.row(k);
                    let dst = &mut g.data_mut()[i * cols..(i + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                send(*a, g);
            }
            Op::SelectCol(a, col) => {
                let x = val(*a);
                let mut g = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    g.set(r, *col, up.data()[r]);
                }
                send(*a, g);
            }
            Op::Clamp(a, lo, hi) => send(
                *a,
                up.zip_map(val(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }),
            ),
            Op::GradReverse(a, s) => send(*a, up.map(|g| -s * g)),
        }
    }
}
