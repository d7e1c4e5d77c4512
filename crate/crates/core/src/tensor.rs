//! A small tape-based reverse-mode autodiff engine over dense row-major
//! `f64` matrices.
//!
//! A [`Graph`] owns every value produced during one forward pass. Leaves are
//! added with [`Graph::param`] (gradient tracked) or [`Graph::constant`];
//! each op appends a node whose parents precede it, so the tape is always
//! topologically ordered and reverse iteration is a valid backward pass.

use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense row-major matrix value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("{} values for {rows}x{cols}", data.len()),
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

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool, c: &mut [f64], beta: f64) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if trans_b { b.rows } else { b.cols };
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides and extents describe the exact buffers of `a`, `b`, `c`.
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

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Error reduction for [`Graph::pose_distance`].
#[derive(Clone, Debug)]
pub enum PoseDistanceMode {
    /// Point `k` is compared with its own transformed counterpart.
    Matched,
    /// Point `k` is compared with the nearest transformed model point; the
    /// nearest index is chosen in the forward pass and treated as constant.
    Nearest,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Relu(Var),
    RowSoftmax(Var),
    RowL2Normalize(Var, Rc<Vec<f64>>),
    MeanPoolRows(Var),
    MaxPoolRows(Var, Rc<Vec<usize>>),
    Mse(Var, Var),
    L1(Var, Var),
    Scale(Var, f64),
    PoseDistance {
        quat: Var,
        trans: Var,
        points: Rc<Vec<[f64; 3]>>,
        targets: Rc<Vec<[f64; 3]>>,
        pairs: Rc<Vec<u32>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    zero_rows: usize,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// Rotates `p` by the (not necessarily unit) quaternion `(w, v)` using
/// `p + 2w(v×p) + 2v×(v×p)`.
#[inline]
fn quat_rotate(q: &[f64], p: &[f64; 3]) -> [f64; 3] {
    let (w, v) = (q[0], [q[1], q[2], q[3]]);
    let c1 = cross(&v, p);
    let c2 = cross(&v, &c1);
    [
        p[0] + 2.0 * (w * c1[0] + c2[0]),
        p[1] + 2.0 * (w * c1[1] + c2[1]),
        p[2] + 2.0 * (w * c1[2] + c2[2]),
    ]
}

#[inline]
fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
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

    /// Number of all-zero rows seen by `row_l2_normalize` so far.
    pub fn zero_rows_flagged(&self) -> usize {
        self.zero_rows
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFiniteInput(format!("output of {}", op_name(&op))));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFiniteInput("leaf tensor".into()));
        }
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Adds a leaf with no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`. Zero-filled
    /// when `v` did not influence the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.value(v).shape();
                Tensor::zeros(r, c)
            }
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        gemm(ta, false, tb, false, &mut out.data, 0.0);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// Elementwise sum of equal shapes, or `a` plus a `1×cols` row vector `b`
    /// broadcast over every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        if ta.shape() == tb.shape() {
            let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
            let out = Tensor::new(ta.rows, ta.cols, data)?;
            self.push(out, Op::Add(a, b), rg)
        } else if tb.rows == 1 && tb.cols == ta.cols {
            let mut out = ta.clone();
            for row in out.data.chunks_mut(ta.cols.max(1)) {
                for (x, y) in row.iter_mut().zip(&tb.data) {
                    *x += y;
                }
            }
            self.push(out, Op::AddRow(a, b), rg)
        } else {
            Err(shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape())))
        }
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(shape_err("concat_cols", "no inputs".into()));
        };
        let rows = self.value(*first).rows;
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows != rows) {
            return Err(shape_err(
                "concat_cols",
                format!("{} rows vs {}", self.value(*bad).rows, rows),
            ));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor { rows, cols, data }, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start >= end || end > ta.cols {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {} cols", ta.cols)));
        }
        let mut data = Vec::with_capacity(ta.rows * (end - start));
        for r in 0..ta.rows {
            data.extend_from_slice(&ta.row(r)[start..end]);
        }
        let out = Tensor {
            rows: ta.rows,
            cols: end - start,
            data,
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().map(|x| x.max(0.0)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.cols == 0 {
            return Err(shape_err("row_softmax", "zero columns".into()));
        }
        let mut out = ta.clone();
        for row in out.data.chunks_mut(ta.cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::RowSoftmax(a), rg)
    }

    /// Scales every row to unit L2 norm. All-zero rows stay zero and are
    /// counted in [`Graph::zero_rows_flagged`].
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.cols == 0 {
            return Err(shape_err("row_l2_normalize", "zero columns".into()));
        }
        let mut out = ta.clone();
        let mut norms = Vec::with_capacity(ta.rows);
        let mut zeros = 0;
        for row in out.data.chunks_mut(ta.cols) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            } else {
                zeros += 1;
            }
            norms.push(n);
        }
        self.zero_rows += zeros;
        let rg = self.rg(&[a]);
        self.push(out, Op::RowL2Normalize(a, Rc::new(norms)), rg)
    }

    /// Column means as a `1×cols` row.
    pub fn mean_pool_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows == 0 {
            return Err(shape_err("mean_pool_rows", "zero rows".into()));
        }
        let mut out = Tensor::zeros(1, ta.cols);
        for row in ta.data.chunks(ta.cols.max(1)) {
            for (o, x) in out.data.iter_mut().zip(row) {
                *o += x;
            }
        }
        let n = ta.rows as f64;
        out.data.iter_mut().for_each(|x| *x /= n);
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanPoolRows(a), rg)
    }

    /// Column maxima as a `1×cols` row. The gradient goes to the first row
    /// attaining each maximum.
    pub fn max_pool_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows == 0 {
            return Err(shape_err("max_pool_rows", "zero rows".into()));
        }
        let mut out = Tensor::filled(1, ta.cols, f64::NEG_INFINITY);
        let mut at = vec![0usize; ta.cols];
        for (r, row) in ta.data.chunks(ta.cols.max(1)).enumerate() {
            for (c, x) in row.iter().enumerate() {
                if *x > out.data[c] {
                    out.data[c] = *x;
                    at[c] = r;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::MaxPoolRows(a, Rc::new(at)), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb || self.value(a).is_empty() {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: f64 = ta.data.iter().zip(&tb.data).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(s / ta.len() as f64);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mse(a, b), rg)
    }

    /// Mean absolute difference over all entries.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: f64 = ta.data.iter().zip(&tb.data).map(|(x, y)| (x - y).abs()).sum();
        let out = Tensor::scalar(s / ta.len() as f64);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::L1(a, b), rg)
    }

    pub fn scalar_scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().map(|x| x * c).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Broadcasts a `1×cols` row to `rows` rows (a matmul with a ones column).
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let ones = self.constant(Tensor::filled(rows, 1, 1.0))?;
        self.matmul(ones, a)
    }

    /// Per-candidate mean point distance between `R_i p + t_i` and a fixed
    /// target set.
    ///
    /// `quat` is `N×4` (`w x y z` per row), `trans` is `N×3`, `points` and
    /// `targets` hold `K` points each. Output is `N×1`, row `i` holding
    /// `(1/K) Σ_k ‖R_i p_{j(k)} + t_i − y_k‖` with `j(k) = k` for
    /// [`PoseDistanceMode::Matched`] and the nearest transformed point for
    /// [`PoseDistanceMode::Nearest`].
    pub fn pose_distance(
        &mut self,
        quat: Var,
        trans: Var,
        points: Rc<Vec<[f64; 3]>>,
        targets: Rc<Vec<[f64; 3]>>,
        mode: PoseDistanceMode,
    ) -> Result<Var> {
        let (tq, tt) = (self.value(quat), self.value(trans));
        if tq.cols != 4 || tt.cols != 3 || tq.rows != tt.rows {
            return Err(shape_err("pose_distance", format!("quat {:?}, trans {:?}", tq.shape(), tt.shape())));
        }
        let k = points.len();
        if k == 0 || targets.len() != k {
            return Err(shape_err("pose_distance", format!("{} points vs {} targets", k, targets.len())));
        }
        let n = tq.rows;
        let mut out = Tensor::zeros(n, 1);
        let mut pairs = Vec::with_capacity(n * k);
        let mut moved = vec![[0.0; 3]; k];
        for i in 0..n {
            let q = tq.row(i);
            let t = tt.row(i);
            for (m, p) in moved.iter_mut().zip(points.iter()) {
                let r = quat_rotate(q, p);
                *m = [r[0] + t[0], r[1] + t[1], r[2] + t[2]];
            }
            let mut total = 0.0;
            for (kk, y) in targets.iter().enumerate() {
                let j = match mode {
                    PoseDistanceMode::Matched => kk,
                    PoseDistanceMode::Nearest => nearest(&moved, y),
                };
                let m = &moved[j];
                total += ((m[0] - y[0]).powi(2) + (m[1] - y[1]).powi(2) + (m[2] - y[2]).powi(2)).sqrt();
                pairs.push(j as u32);
            }
            out.data[i] = total / k as f64;
        }
        let rg = self.rg(&[quat, trans]);
        self.push(
            out,
            Op::PoseDistance {
                quat,
                trans,
                points,
                targets,
                pairs: Rc::new(pairs),
            },
            rg,
        )
    }

    /// Runs the backward pass from a `1×1` loss, replacing any earlier
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lt.rows,
                cols: lt.cols,
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    gemm(g, false, tb, true, &mut da.data, 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(tb.rows, tb.cols);
                    gemm(ta, true, g, false, &mut db.data, 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut db = Tensor::zeros(1, g.cols);
                for row in g.data.chunks(g.cols.max(1)) {
                    for (d, x) in db.data.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *b, db);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols;
                    if self.requires_grad(*p) {
                        let mut d = Vec::with_capacity(g.rows * cols);
                        for r in 0..g.rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.accumulate(
                            grads,
                            *p,
                            Tensor {
                                rows: g.rows,
                                cols,
                                data: d,
                            },
                        );
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..g.rows {
                    d.data[r * ta.cols + start..r * ta.cols + start + g.cols].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let data = ta.data.iter().zip(&g.data).map(|(x, d)| if *x > 0.0 { *d } else { 0.0 }).collect();
                self.accumulate(
                    grads,
                    *a,
                    Tensor {
                        rows: ta.rows,
                        cols: ta.cols,
                        data,
                    },
                );
            }
            Op::RowSoftmax(a) => {
                let mut d = Tensor::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let (y, dy) = (out.row(r), g.row(r));
                    let s: f64 = y.iter().zip(dy).map(|(y, d)| y * d).sum();
                    for c in 0..out.cols {
                        d.data[r * out.cols + c] = y[c] * (dy[c] - s);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowL2Normalize(a, norms) => {
                let mut d = Tensor::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let n = norms[r];
                    if n == 0.0 {
                        continue;
                    }
                    let (y, dy) = (out.row(r), g.row(r));
                    let s: f64 = y.iter().zip(dy).map(|(y, d)| y * d).sum();
                    for c in 0..out.cols {
                        d.data[r * out.cols + c] = (dy[c] - y[c] * s) / n;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanPoolRows(a) => {
                let ta = self.value(*a);
                let scale = 1.0 / ta.rows as f64;
                let mut d = Tensor::zeros(ta.rows, ta.cols);
                for row in d.data.chunks_mut(ta.cols.max(1)) {
                    for (x, gg) in row.iter_mut().zip(&g.data) {
                        *x = gg * scale;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MaxPoolRows(a, at) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows, ta.cols);
                for (c, &r) in at.iter().enumerate() {
                    d.data[r * ta.cols + c] = g.data[c];
                }
                self.accumulate(grads, *a, d);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = 2.0 * g.item() / ta.len() as f64;
                let da: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(x, y)| scale * (x - y)).collect();
                let db: Vec<f64> = da.iter().map(|x| -x).collect();
                self.accumulate(grads, *a, Tensor { rows: ta.rows, cols: ta.cols, data: da });
                self.accumulate(grads, *b, Tensor { rows: ta.rows, cols: ta.cols, data: db });
            }
            Op::L1(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = g.item() / ta.len() as f64;
                let da: Vec<f64> = ta
                    .data
                    .iter()
                    .zip(&tb.data)
                    .map(|(x, y)| {
                        let diff = x - y;
                        if diff > 0.0 {
                            scale
                        } else if diff < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let db: Vec<f64> = da.iter().map(|x| -x).collect();
                self.accumulate(grads, *a, Tensor { rows: ta.rows, cols: ta.cols, data: da });
                self.accumulate(grads, *b, Tensor { rows: ta.rows, cols: ta.cols, data: db });
            }
            Op::Scale(a, c) => {
                let d = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().map(|x| x * c).collect(),
                };
                self.accumulate(grads, *a, d);
            }
            Op::PoseDistance {
                quat,
                trans,
                points,
                targets,
                pairs,
            } => {
                let (tq, tt) = (self.value(*quat), self.value(*trans));
                let k = targets.len();
                let mut dq = Tensor::zeros(tq.rows, 4);
                let mut dt = Tensor::zeros(tt.rows, 3);
                for i in 0..tq.rows {
                    let scale = g.data[i] / k as f64;
                    let q = tq.row(i);
                    let (w, v) = (q[0], [q[1], q[2], q[3]]);
                    let t = tt.row(i);
                    let mut gw = 0.0;
                    let mut gv = [0.0; 3];
                    let mut gt = [0.0; 3];
                    for (kk, y) in targets.iter().enumerate() {
                        let p = &points[pairs[i * k + kk] as usize];
                        let r = quat_rotate(q, p);
                        let res = [r[0] + t[0] - y[0], r[1] + t[1] - y[1], r[2] + t[2] - y[2]];
                        let len = dot(&res, &res).sqrt();
                        if len < 1e-15 {
                            continue;
                        }
                        let e = [scale * res[0] / len, scale * res[1] / len, scale * res[2] / len];
                        for a in 0..3 {
                            gt[a] += e[a];
                        }
                        let vxp = cross(&v, p);
                        gw += 2.0 * dot(&e, &vxp);
                        let pxe = cross(p, &e);
                        let (ve, vp, pe) = (dot(&v, &e), dot(&v, p), dot(p, &e));
                        for a in 0..3 {
                            gv[a] += 2.0 * w * pxe[a] + 2.0 * (ve * p[a] + vp * e[a] - 2.0 * pe * v[a]);
                        }
                    }
                    dq.data[i * 4] = gw;
                    dq.data[i * 4 + 1..i * 4 + 4].copy_from_slice(&gv);
                    dt.data[i * 3..i * 3 + 3].copy_from_slice(&gt);
                }
                self.accumulate(grads, *quat, dq);
                self.accumulate(grads, *trans, dt);
            }
        }
    }
}

fn nearest(moved: &[[f64; 3]], y: &[f64; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, m) in moved.iter().enumerate() {
        let d = (m[0] - y[0]).powi(2) + (m[1] - y[1]).powi(2) + (m[2] - y[2]).powi(2);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) | Op::AddRow(..) => "add",
        Op::Transpose(_) => "transpose",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::Relu(_) => "relu",
        Op::RowSoftmax(_) => "row_softmax",
        Op::RowL2Normalize(..) => "row_l2_normalize",
        Op::MeanPoolRows(_) => "mean_pool_rows",
        Op::MaxPoolRows(..) => "max_pool_rows",
        Op::Mse(..) => "mse",
        Op::L1(..) => "l1",
        Op::Scale(..) => "scalar_scale",
        Op::PoseDistance { .. } => "pose_distance",
    }
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per parameter, in input order.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
    /// Entries judged against a one-sided difference because the central
    /// stencil straddled a kink.
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().cloned().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance
    }
}

/// Relative error with an absolute floor so that gradients near zero are
/// compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients of `build` against central differences.
///
/// `build` receives a fresh graph and one param var per entry of `params`
/// and must return a scalar loss.
pub fn grad_check<F>(build: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_gradients(build, params, h, tol, false)
}

/// Like [`grad_check`], for losses with relu, max or absolute-value kinks.
/// When the central difference misses, the entry is re-checked with
/// second-order one-sided stencils of step `h/10` on both sides. A stencil
/// that crossed a kink is off by the jump in slope, while the stencil on
/// the smooth side must still match the analytic gradient.
pub fn grad_check_piecewise<F>(build: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_gradients(build, params, h, tol, true)
}

fn check_gradients<F>(build: F, params: &[Tensor], h: f64, tol: f64, piecewise: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = values.iter().map(|v| g.param(v.clone())).collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &vars)?;
        Ok((g, vars, loss))
    };
    let (mut g, vars, loss) = eval(params)?;
    let base = g.value(loss).item();
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| g.grad(*v)).collect();

    let mut work = params.to_vec();
    let at = |work: &mut Vec<Tensor>, p: usize, e: usize, x: f64| -> Result<f64> {
        let orig = work[p].data[e];
        work[p].data[e] = x;
        let (g, _, l) = eval(work)?;
        work[p].data[e] = orig;
        Ok(g.value(l).item())
    };
    let mut report = Vec::with_capacity(params.len());
    let mut kinks = 0;
    for (p, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for e in 0..work[p].len() {
            let x = work[p].data[e];
            let a = grad.data[e];
            let numeric = (at(&mut work, p, e, x + h)? - at(&mut work, p, e, x - h)?) / (2.0 * h);
            let mut err = relative_error(a, numeric);
            if piecewise && err > tol {
                let k = h / 10.0;
                let fwd = (-3.0 * base + 4.0 * at(&mut work, p, e, x + k)? - at(&mut work, p, e, x + 2.0 * k)?) / (2.0 * k);
                let bwd = (3.0 * base - 4.0 * at(&mut work, p, e, x - k)? + at(&mut work, p, e, x - 2.0 * k)?) / (2.0 * k);
                let one_sided = relative_error(a, fwd).min(relative_error(a, bwd));
                if one_sided <= tol {
                    kinks += 1;
                    err = one_sided;
                }
            }
            worst = worst.max(err);
        }
        report.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error: report,
        tolerance: tol,
        kinks,
    })
}

/// Hyperparameters of the Adam optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(shape_err("adam_step", format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for e in 0..p.data.len() {
            let gi = g.data[e];
            m.data[e] = cfg.beta1 * m.data[e] + (1.0 - cfg.beta1) * gi;
            v.data[e] = cfg.beta2 * v.data[e] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m.data[e] / bc1;
            let vh = v.data[e] / bc2;
            p.data[e] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn relu_example() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(1, 3, vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(1, 3)).unwrap();
        let y = g.row_softmax(x).unwrap();
        for v in &g.value(y).data {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let mut t = random(&mut rng, 5, 7);
        t.data.iter_mut().for_each(|x| *x *= 50.0);
        let x = g.constant(t).unwrap();
        let y = g.row_softmax(x).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 3, 3);
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3)).unwrap();
        let av = g.constant(a.clone()).unwrap();
        let y = g.matmul(i, av).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3)).unwrap();
        let b = g.constant(Tensor::zeros(2, 3)).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
        let c = g.constant(Tensor::zeros(3, 3)).unwrap();
        assert!(matches!(g.mse(a, c), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(g.add(a, c), Err(Error::ShapeMismatch { .. })));
        let empty = g.constant(Tensor::zeros(2, 0)).unwrap();
        assert!(g.row_softmax(empty).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let mut g = Graph::new();
        assert!(matches!(
            g.param(Tensor::scalar(f64::NAN)),
            Err(Error::NonFiniteInput(_))
        ));
        let big = g.constant(Tensor::scalar(1e300)).unwrap();
        assert!(matches!(g.matmul(big, big), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn mse_and_l1_grads() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0)).unwrap();
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let loss = g.mse(x, z).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data, vec![6.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(-2.0)).unwrap();
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let loss = g.l1(x, z).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data, vec![-1.0]);
    }

    #[test]
    fn non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(2, 2)).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { rows: 2, cols: 2 })));
    }

    #[test]
    fn zero_rows_are_flagged() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = g.row_l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data, vec![0.0, 0.0, 0.6, 0.8]);
        assert_eq!(g.zero_rows_flagged(), 1);
    }

    #[test]
    fn constant_param_has_zero_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 2, 2);
        let unused = random(&mut rng, 3, 1);
        let mut g = Graph::new();
        let av = g.param(a).unwrap();
        let uv = g.param(unused).unwrap();
        let zero = g.constant(Tensor::zeros(2, 2)).unwrap();
        let loss = g.mse(av, zero).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(uv).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_layer_mlp_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 6, 4);
        let y = random(&mut rng, 6, 2);
        let params = vec![random(&mut rng, 4, 8), random(&mut rng, 1, 8), random(&mut rng, 8, 2)];
        let report = grad_check(
            |g, p| {
                let xv = g.constant(x.clone())?;
                let yv = g.constant(y.clone())?;
                let h = g.matmul(xv, p[0])?;
                let h = g.add(h, p[1])?;
                let h = g.relu(h)?;
                let o = g.matmul(h, p[2])?;
                g.mse(o, yv)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut params = vec![Tensor::new(1, 2, vec![0.5, -0.25]).unwrap()];
        let mut state = AdamState::new(&params);
        state.m[0].data = vec![0.1, 0.2];
        let before = params.clone();
        adam_step(&mut params, &[Tensor::zeros(1, 2)], &mut state, &AdamConfig::default()).unwrap();
        // moments decay but a zero first moment from zero state moves nothing
        assert!(state.m[0].data[0] < 0.1);
        let mut fresh = before.clone();
        let mut fresh_state = AdamState::new(&fresh);
        adam_step(&mut fresh, &[Tensor::zeros(1, 2)], &mut fresh_state, &AdamConfig::default()).unwrap();
        assert_eq!(fresh, before);
    }

    #[test]
    fn adam_single_step_from_zero_state() {
        let cfg = AdamConfig::default();
        let g = 0.3;
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::scalar(g)], &mut state, &cfg).unwrap();
        // m̂ = g and v̂ = g² after bias correction
        let expected = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
        assert_abs_diff_eq!(params[0].item(), expected, epsilon = 1e-15);
    }

    #[test]
    fn adam_constant_grad_trajectory() {
        // with a constant gradient both bias-corrected moments are exact, so
        // every step has size lr·|g|/(|g|+eps)
        let cfg = AdamConfig::default();
        let g = -2.0;
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        let mut prev = 0.0;
        for _ in 0..500 {
            adam_step(&mut params, &[Tensor::scalar(g)], &mut state, &cfg).unwrap();
            let step = params[0].item() - prev;
            assert_abs_diff_eq!(step, cfg.lr * 2.0 / (2.0 + cfg.eps), epsilon = 1e-12);
            prev = params[0].item();
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut params = vec![Tensor::zeros(2, 2)];
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &[Tensor::zeros(1, 2)], &mut state, &AdamConfig::default()).is_err());
    }
}
