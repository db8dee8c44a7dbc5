//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding its
//! value. [`Graph::backward`] walks the nodes in reverse insertion order and
//! accumulates adjoints. Parameter leaves borrow their values from the caller,
//! so building a graph never copies model weights.
//!
//! Every value is a 2-D `f64` matrix; row vectors are `1×n`, scalars `1×1`.

use std::borrow::Cow;
use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use crate::params::ParamId;

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Relu(usize),
    Softmax(usize),
    LogSumExpRows(usize),
    RowNorm(usize),
    NormalizeRows(usize),
    NormalizeRowSum(usize),
    Transpose(usize),
    Reshape(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    Rows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    MeanRows(usize),
    Sum(usize),
    Diag(usize),
}

struct Node<'p> {
    value: Cow<'p, Array2<f64>>,
    op: Op,
}

/// A recorded computation.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<ParamId, usize>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an owned constant (or differentiable input) leaf.
    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Records a parameter leaf that borrows `value`. Repeated calls with the
    /// same id return the same node.
    pub fn param(&mut self, id: ParamId, value: &'p Array2<f64>) -> NodeId {
        if let Some(&idx) = self.params.get(&id) {
            return NodeId(idx);
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        let idx = self.nodes.len() - 1;
        self.params.insert(id, idx);
        NodeId(idx)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).dim()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn v(&self, id: NodeId) -> ArrayView2<'_, f64> {
        self.nodes[id.0].value.view()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.v(a).dot(&self.v(b));
        self.push(out, Op::MatMul(a.0, b.0))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.v(a).dot(&self.v(b).t());
        self.push(out, Op::MatMulT(a.0, b.0))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.v(a) + &self.v(b);
        self.push(out, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.v(a) - &self.v(b);
        self.push(out, Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.v(a) * &self.v(b);
        self.push(out, Op::Mul(a.0, b.0))
    }

    /// Adds the `1×n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(row).0, 1);
        let out = &self.v(a) + &self.v(row);
        self.push(out, Op::AddRow(a.0, row.0))
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `m×1`).
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(col).1, 1);
        let out = &self.v(a) * &self.v(col);
        self.push(out, Op::MulCol(a.0, col.0))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let out = self.v(a).mapv(|x| x * k);
        self.push(out, Op::Scale(a.0, k))
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let out = self.v(a).mapv(|x| x + k);
        self.push(out, Op::AddScalar(a.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.v(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.v(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a.0))
    }

    /// Row-wise softmax. Columns whose `keep` flag is false receive exactly
    /// zero weight.
    pub fn softmax_rows(&mut self, a: NodeId, keep: Option<&[bool]>) -> NodeId {
        let x = self.v(a);
        let mut out = Array2::<f64>::zeros(x.dim());
        for (xr, mut or) in x.rows().into_iter().zip(out.rows_mut()) {
            let kept = |j: usize| keep.is_none_or(|k| k[j]);
            let max = xr
                .iter()
                .enumerate()
                .filter(|(j, _)| kept(*j))
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, (o, v)) in or.iter_mut().zip(xr.iter()).enumerate() {
                if kept(j) {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            or.mapv_inplace(|o| o / total);
        }
        self.push(out, Op::Softmax(a.0))
    }

    /// `log Σ_j exp(a_ij)` per row, as an `m×1` column.
    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.v(a);
        let out = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| {
            let r = x.row(i);
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        });
        self.push(out, Op::LogSumExpRows(a.0))
    }

    /// Euclidean norm of each row, as an `m×1` column.
    pub fn row_norm(&mut self, a: NodeId) -> NodeId {
        let x = self.v(a);
        let out = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| {
            x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()
        });
        self.push(out, Op::RowNorm(a.0))
    }

    /// Divides each row by its Euclidean norm. Callers guarantee non-zero rows.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.v(a);
        let mut out = x.to_owned();
        for mut r in out.rows_mut() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.mapv_inplace(|v| v / n);
        }
        self.push(out, Op::NormalizeRows(a.0))
    }

    /// Divides each row by its sum.
    pub fn normalize_row_sum(&mut self, a: NodeId) -> NodeId {
        let x = self.v(a);
        let mut out = x.to_owned();
        for mut r in out.rows_mut() {
            let total = r.sum();
            r.mapv_inplace(|v| v / total);
        }
        self.push(out, Op::NormalizeRowSum(a.0))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.v(a).t().to_owned();
        self.push(out, Op::Transpose(a.0))
    }

    /// Row-major reshape to `rows × cols`.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let x = self.v(a);
        assert_eq!(x.len(), rows * cols, "reshape keeps the element count");
        let out = Array2::from_shape_vec((rows, cols), x.iter().copied().collect()).expect("sizes checked");
        self.push(out, Op::Reshape(a.0))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let out = self.v(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a.0, start))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.v(*p)).collect();
        let out = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    /// Gathers rows by index (rows may repeat).
    pub fn rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let out = self.v(a).select(Axis(0), idx);
        self.push(out, Op::Rows(a.0, idx.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.v(*p)).collect();
        let out = concatenate(Axis(0), &views).expect("column counts agree");
        self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    /// Column means as a `1×n` row.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.v(a);
        let out = x
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a.0))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Array2::from_elem((1, 1), self.v(a).sum());
        self.push(out, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.v(a).len() as f64;
        let total = self.sum(a);
        self.scale(total, 1.0 / n)
    }

    /// Diagonal of a square matrix as an `m×1` column.
    pub fn diag(&mut self, a: NodeId) -> NodeId {
        let x = self.v(a);
        let out = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| x[[i, i]]);
        self.push(out, Op::Diag(a.0))
    }

    /// Reverse pass from a `1×1` node.
    pub fn backward(&self, output: NodeId) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        self.backward_seeded(&[(output, Array2::ones((1, 1)))])
    }

    /// Reverse pass from arbitrary upstream adjoints.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Array2<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        let top = seeds.iter().map(|(n, _)| n.0).max().unwrap_or(0);
        for (n, g) in seeds {
            accumulate(&mut grads, n.0, g.clone());
        }
        for idx in (0..=top).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(pid, idx)| grads[*idx].clone().map(|g| (*pid, g)))
            .collect();
        Gradients { nodes: grads, params }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |i: usize| self.nodes[i].value.view();
        let out = val(idx);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&val(*b).t()));
                accumulate(grads, *b, val(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                accumulate(grads, *a, g.dot(&val(*b)));
                accumulate(grads, *b, g.t().dot(&val(*a)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * &val(*b));
                accumulate(grads, *b, g * &val(*a));
            }
            Op::AddRow(a, r) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulCol(a, c) => {
                accumulate(grads, *a, g * &val(*c));
                let gc = (g * &val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                accumulate(grads, *c, gc);
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.mapv(|x| x * k)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&out).for_each(|d, y| *d *= 1.0 - y * y);
                accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&val(*a))
                    .for_each(|d, x| if *x <= 0.0 { *d = 0.0 });
                accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let mut d = g * &out;
                for (mut dr, yr) in d.rows_mut().into_iter().zip(out.rows()) {
                    let dot = dr.sum();
                    Zip::from(&mut dr).and(&yr).for_each(|d, y| *d -= y * dot);
                }
                accumulate(grads, *a, d);
            }
            Op::LogSumExpRows(a) => {
                let x = val(*a);
                let mut d = Array2::zeros(x.dim());
                for i in 0..x.nrows() {
                    let lse = out[[i, 0]];
                    for j in 0..x.ncols() {
                        d[[i, j]] = g[[i, 0]] * (x[[i, j]] - lse).exp();
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::RowNorm(a) => {
                let x = val(*a);
                let mut d = x.to_owned();
                for (i, mut r) in d.rows_mut().into_iter().enumerate() {
                    let n = out[[i, 0]];
                    let k = if n > 0.0 { g[[i, 0]] / n } else { 0.0 };
                    r.mapv_inplace(|v| v * k);
                }
                accumulate(grads, *a, d);
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let mut d = g.clone();
                for i in 0..x.nrows() {
                    let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let y = out.row(i);
                    let dot = g.row(i).dot(&y);
                    let mut dr = d.row_mut(i);
                    Zip::from(&mut dr).and(&y).for_each(|d, y| *d = (*d - y * dot) / n);
                }
                accumulate(grads, *a, d);
            }
            Op::NormalizeRowSum(a) => {
                let x = val(*a);
                let mut d = g.clone();
                for i in 0..x.nrows() {
                    let total = x.row(i).sum();
                    let dot = g.row(i).dot(&out.row(i));
                    d.row_mut(i).mapv_inplace(|v| (v - dot) / total);
                }
                accumulate(grads, *a, d);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.t().to_owned()),
            Op::Reshape(a) => {
                let dim = self.nodes[*a].value.dim();
                let d = Array2::from_shape_vec(dim, g.iter().copied().collect()).expect("sizes match");
                accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.nodes[*a].value.dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[*p].value.ncols();
                    accumulate(grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::Rows(a, idx_list) => {
                let mut d = Array2::zeros(self.nodes[*a].value.dim());
                for (k, &src) in idx_list.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(k);
                }
                accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.nodes[*p].value.nrows();
                    accumulate(grads, *p, g.slice(s![offset..offset + h, ..]).to_owned());
                    offset += h;
                }
            }
            Op::MeanRows(a) => {
                let m = self.nodes[*a].value.nrows();
                let row = g.mapv(|v| v / m as f64);
                let d = row
                    .broadcast(self.nodes[*a].value.dim())
                    .expect("broadcast row")
                    .to_owned();
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Array2::from_elem(self.nodes[*a].value.dim(), g[[0, 0]]);
                accumulate(grads, *a, d);
            }
            Op::Diag(a) => {
                let mut d = Array2::zeros(self.nodes[*a].value.dim());
                for i in 0..g.nrows() {
                    d[[i, i]] = g[[i, 0]];
                }
                accumulate(grads, *a, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
    match &mut grads[idx] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints produced by a reverse pass.
pub struct Gradients {
    nodes: Vec<Option<Array2<f64>>>,
    params: HashMap<ParamId, Array2<f64>>,
}

impl Gradients {
    /// Adjoint of an arbitrary node; `None` when the output does not depend on it.
    pub fn node(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.nodes[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> HashMap<ParamId, Array2<f64>> {
        self.params
    }
}
