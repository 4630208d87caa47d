//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Graph`] records every operation as a node; nodes are appended in
//! evaluation order, so iterating them backwards is a valid reverse
//! topological order. Gradients are only propagated into subgraphs that
//! reach a parameter leaf.

use std::fmt;

use crate::error::{Error, Result};

/// Dense 2-D tensor of `f64`, row-major. Scalars are `1 x 1`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape())?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "tensor",
                left: [rows, cols],
                right: [data.len(), 1],
            });
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

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: [rows.len(), cols],
                    right: [1, r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `c = beta * c + op(a) * op(b)` where `op` optionally transposes. `m x n`
/// result, inner dimension `k`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &Tensor, ta: bool, b: &Tensor, tb: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides describe the row-major buffers of `a`, `b` and `c`,
    // whose lengths match the m/k/n extents checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product, no graph.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Tensor::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, a, false, b, false, &mut out.data, 0.0);
    Ok(out)
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Concat(Vec<Var>),
    GatherRows(Var, Vec<u32>),
    Tanh(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    ScalarMul(Var, f64),
    Softplus(Var),
    Select(Var, Vec<(usize, usize)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation graph. Build values with the op methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows != 1 || tr.cols != ta.cols {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&tr.data) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// Concatenates along columns; all parts need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Shape {
            op: "concat",
            left: [0, 0],
            right: [0, 0],
        })?;
        let rows = self.value(*first).rows;
        for p in parts {
            let t = self.value(*p);
            if t.rows != rows {
                return Err(shape_err("concat", self.value(*first), t));
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for p in parts {
                let t = self.value(*p);
                out.row_mut(r)[offset..offset + t.cols].copy_from_slice(t.row(r));
                offset += t.cols;
            }
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= t.rows {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: t.rows,
                });
            }
            out.row_mut(i).copy_from_slice(t.row(id as usize));
        }
        let ng = self.needs(table);
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec()), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a)).map(f64::exp);
        let ng = self.needs(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.data.len().max(1) as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(out, Op::ScalarMul(a, c), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let ng = self.needs(a);
        self.push(out, Op::Softplus(a), ng)
    }

    /// Picks the elements at `(row, col)` into an `n x 1` column.
    pub fn select(&mut self, a: Var, indices: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(indices.len());
        for &(r, c) in indices {
            if r >= t.rows || c >= t.cols {
                return Err(Error::Shape {
                    op: "select",
                    left: t.shape(),
                    right: [r, c],
                });
            }
            data.push(t.get(r, c));
        }
        let out = Tensor {
            rows: indices.len(),
            cols: 1,
            data,
        };
        let ng = self.needs(a);
        Ok(self.push(out, Op::Select(a, indices.to_vec()), ng))
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.shape(root);
        if shape != [1, 1] {
            return Err(Error::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    gemm(g.rows, g.cols, tb.rows, g, false, tb, true, &mut da.data, 0.0);
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(tb.rows, tb.cols);
                    gemm(ta.cols, ta.rows, g.cols, ta, true, g, false, &mut db.data, 0.0);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let zip = |t: &Tensor| Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&t.data).map(|(x, y)| x * y).collect(),
                };
                if self.needs(*a) {
                    acc(*a, zip(tb));
                }
                if self.needs(*b) {
                    acc(*b, zip(ta));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.needs(*row) {
                    let mut dr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, x) in dr.data.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*row, dr);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols;
                    if self.needs(*p) {
                        let mut dp = Tensor::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        acc(*p, dp);
                    }
                    offset += cols;
                }
            }
            Op::GatherRows(table, ids) => {
                let t = self.value(*table);
                let mut dt = Tensor::zeros(t.rows, t.cols);
                for (i, &id) in ids.iter().enumerate() {
                    for (d, x) in dt.row_mut(id as usize).iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                acc(*table, dt);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&y.data).map(|(gx, yx)| gx * (1.0 - yx * yx)).collect(),
                };
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..g.rows {
                    let total: f64 = g.row(r).iter().sum();
                    for (dx, yx) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                        *dx -= yx.exp() * total;
                    }
                }
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let mut d = g.clone();
                for r in 0..g.rows {
                    let dot: f64 = g.row(r).iter().zip(s.row(r)).map(|(x, y)| x * y).sum();
                    for (dx, sx) in d.row_mut(r).iter_mut().zip(s.row(r)) {
                        *dx = sx * (*dx - dot);
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                acc(*a, Tensor::filled(t.rows, t.cols, g.item()));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                acc(*a, Tensor::filled(t.rows, t.cols, g.item() / t.data.len().max(1) as f64));
            }
            Op::ScalarMul(a, c) => acc(*a, g.map(|x| x * c)),
            Op::Softplus(a) => {
                let x = self.value(*a);
                let d = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&x.data).map(|(gx, xx)| gx * sigmoid(*xx)).collect(),
                };
                acc(*a, d);
            }
            Op::Select(a, indices) => {
                let t = self.value(*a);
                let mut d = Tensor::zeros(t.rows, t.cols);
                for (i, &(r, c)) in indices.iter().enumerate() {
                    d.data[r * t.cols + c] += g.data[i];
                }
                acc(*a, d);
            }
        }
    }
}

/// Gradients of a root with respect to every node that needs them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when it does not influence the root.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| {
            let [r, c] = graph.shape(v);
            Tensor::zeros(r, c)
        })
    }
}

/// Result of comparing analytic gradients to central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter index, flat element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Relative error `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    grad_check_coords(f, params, eps, &coords)
}

/// Checks the listed `(parameter, element)` coordinates with central
/// differences `(f(p + eps) - f(p - eps)) / (2 eps)`.
pub fn grad_check_coords<F>(f: F, params: &[Tensor], eps: f64, coords: &[(usize, usize)]) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|t| g.param(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.scalar(root))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();

    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &(p, i) in coords {
        let orig = work[p].data[i];
        work[p].data[i] = orig + eps;
        let up = eval(&work)?;
        work[p].data[i] = orig - eps;
        let down = eval(&work)?;
        work[p].data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic[p].data[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((p, i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn forward_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 2, &[0.0, 0.0]));
        let y = g.log_softmax(x);
        let ln2 = std::f64::consts::LN_2;
        for v in g.value(y).data() {
            assert!((v + ln2).abs() < 1e-15);
        }
        assert!((softplus(0.0) - 0.6931472).abs() < 1e-7);
        let e = g.constant(t(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let r = g.gather_rows(e, &[2]).unwrap();
        assert_eq!(g.value(r).data(), &[5.0, 6.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "shape mismatch in matmul: [2, 3] vs [2, 3]");
        let c = g.constant(Tensor::zeros(3, 2));
        assert!(g.add(a, c).is_err());
        let row = g.constant(Tensor::zeros(1, 2));
        assert!(g.add_row(a, row).is_err());
        assert!(g.gather_rows(a, &[5]).is_err());
        assert!(g.select(a, &[(2, 0)]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(2, 2));
        assert!(matches!(g.backward(a), Err(Error::NonScalarRoot([2, 2]))));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(t(1, 3, &[1.0, -2.0, 0.5]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        // mean(x * x) with x = [1, 2]: d/dx_i = 2 x_i / 2 = x_i
        let mut g = Graph::new();
        let x = g.param(t(1, 2, &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);

        // log_softmax(x)[k] -> e_k - softmax(x)
        let logits = [0.3, -1.2, 2.0, 0.1];
        let k = 2;
        let mut g = Graph::new();
        let x = g.param(t(1, 4, &logits));
        let ls = g.log_softmax(x);
        let pick = g.select(ls, &[(0, k)]).unwrap();
        let root = g.sum(pick);
        let grads = g.backward(root).unwrap();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        for (i, &l) in logits.iter().enumerate() {
            let want = if i == k { 1.0 } else { 0.0 } - l.exp() / z;
            assert!((grads.get(x).unwrap().data()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn log_softmax_infinities() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 3, &[1e300, f64::NEG_INFINITY, 0.0]));
        let y = g.log_softmax(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], f64::NEG_INFINITY);
        assert!(v.iter().all(|x| *x != f64::INFINITY));
        let big = log_softmax_rows(&t(1, 2, &[-1e4, 1e4]));
        assert!(big.all_finite());
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let p = t(1, 4, &[0.5, -1.5, 2.0, 0.25]);
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let s = g.scalar_mul(sq, 3.0);
                Ok(g.sum(s))
            },
            &[p.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        assert_eq!(report.checked, 4);

        let report = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn every_op_passes_grad_check() {
        let a = Tensor::new(3, 4, lcg(1, 12)).unwrap();
        let b = Tensor::new(4, 2, lcg(2, 8)).unwrap();
        let row = Tensor::new(1, 2, lcg(3, 2)).unwrap();
        let c = Tensor::new(3, 2, lcg(4, 6)).unwrap();
        let report = grad_check(
            |g, v| {
                let m = g.matmul(v[0], v[1])?;
                let m = g.add_row(m, v[2])?;
                let h = g.tanh(m);
                let cat = g.concat(&[h, v[3]])?;
                let ls = g.log_softmax(cat);
                let sm = g.softmax(cat);
                let prod = g.mul(ls, sm)?;
                let diff = g.sub(prod, cat)?;
                let sp = g.softplus(diff);
                let sel = g.select(sp, &[(0, 1), (2, 3), (1, 0)])?;
                let gathered = g.gather_rows(v[0], &[2, 0, 2])?;
                let gm = g.mean(gathered);
                let s = g.sum(sel);
                let both = g.concat(&[s, gm])?;
                let total = g.sum(both);
                let added = g.add(total, gm)?;
                Ok(g.scalar_mul(added, 0.7))
            },
            &[a, b, row, c],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.param(t(1, 2, &[1.0, 2.0]));
        let c = g.constant(t(1, 2, &[3.0, 4.0]));
        let m = g.mul(w, c).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }
}
