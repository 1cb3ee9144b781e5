//! Minimal reverse-mode automatic differentiation over dense row-major
//! `f64` matrices. A [`Tape`] records every operation of one forward pass;
//! [`Tape::backward`] then accumulates adjoints from a scalar output.

use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn add_assign(&mut self, o: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        let mut out = Mat::zeros(self.rows, other.cols);
        matmul_acc(self, other, &mut out);
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    let n = b.cols;
    for i in 0..a.rows {
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b`.
fn matmul_tn_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    let n = b.cols;
    for r in 0..a.rows {
        let brow = b.row(r);
        for (k, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out.data[k * n..(k + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    RowScale(Var, Rc<Vec<f64>>),
    GroupSum(Var, usize),
    GroupMax(Var, Vec<usize>),
    ColMax(Var, Vec<usize>),
    BroadcastRows(Var),
    SoftmaxRows(Var),
    BucketBias { scores: Var, table: Var, row: usize, buckets: Rc<Vec<u8>> },
    SumAll(Var),
    SumSquares(Var),
    Chamfer { pred: Var, target: Rc<Mat>, ab: Vec<usize>, ba: Vec<usize>, norm: f64 },
    EdgeNorm { field: Var, edges: Rc<Vec<(usize, usize)>>, squared: bool, norm: f64 },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros of `shape` if `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::InternalConsistency(format!("{op}: incompatible shapes {a:?} and {b:?}"))
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.rows {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let out = va.matmul(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.cols {
            return Err(shape_err("matmul_t", va.shape(), vb.shape()));
        }
        let out = va.matmul_t(vb);
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    /// Adds the `1×c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows != 1 || vb.cols != va.cols {
            return Err(shape_err("add_row", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&vb.data) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        Ok(Mat { rows: va.rows, cols: va.cols, data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Mat {
        let va = self.value(a);
        Mat { rows: va.rows, cols: va.cols, data: va.data.iter().map(|x| f(*x)).collect() }
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]).shape(), v.shape()));
            }
            cols += v.cols;
        }
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                out.data[r * cols + off..r * cols + off + v.cols].copy_from_slice(v.row(r));
                off += v.cols;
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]).shape(), v.shape()));
            }
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        Ok(self.push(Mat { rows, cols, data }, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..start+width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let va = self.value(a);
        if start + width > va.cols {
            return Err(Error::InternalConsistency(format!(
                "slice_cols {start}+{width} exceeds {} columns",
                va.cols
            )));
        }
        let mut out = Mat::zeros(va.rows, width);
        for r in 0..va.rows {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + width]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Rows `a[idx[0]], a[idx[1]], ...`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.rows) {
            return Err(Error::InternalConsistency(format!("gather row {bad} of {}", va.rows)));
        }
        let mut out = Mat::zeros(idx.len(), va.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(va.row(i));
        }
        Ok(self.push(out, Op::GatherRows(a, idx)))
    }

    /// Multiplies row `r` by the constant `w[r]`.
    pub fn row_scale(&mut self, a: Var, w: Rc<Vec<f64>>) -> Result<Var> {
        let va = self.value(a);
        if w.len() != va.rows {
            return Err(shape_err("row_scale", va.shape(), (w.len(), 1)));
        }
        let mut out = va.clone();
        for (r, s) in w.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::RowScale(a, w)))
    }

    fn grouped(&self, a: Var, g: usize) -> Result<&Mat> {
        let va = self.value(a);
        if g == 0 || va.rows % g != 0 {
            return Err(Error::InternalConsistency(format!("{} rows not divisible into groups of {g}", va.rows)));
        }
        Ok(va)
    }

    /// Sums consecutive groups of `g` rows.
    pub fn group_sum(&mut self, a: Var, g: usize) -> Result<Var> {
        let va = self.grouped(a, g)?;
        let n = va.rows / g;
        let mut out = Mat::zeros(n, va.cols);
        for r in 0..va.rows {
            let src = va.row(r);
            for (o, s) in out.row_mut(r / g).iter_mut().zip(src) {
                *o += s;
            }
        }
        Ok(self.push(out, Op::GroupSum(a, g)))
    }

    /// Per-column maximum over consecutive groups of `g` rows; ties pick the
    /// first row of the group.
    pub fn group_max(&mut self, a: Var, g: usize) -> Result<Var> {
        let va = self.grouped(a, g)?;
        let n = va.rows / g;
        let c = va.cols;
        let mut out = Mat::zeros(n, c);
        let mut arg = vec![0usize; n * c];
        for i in 0..n {
            let base = i * g;
            out.row_mut(i).copy_from_slice(va.row(base));
            arg[i * c..(i + 1) * c].fill(base);
            for r in base + 1..base + g {
                let src = va.row(r);
                for ch in 0..c {
                    if src[ch] > out.data[i * c + ch] {
                        out.data[i * c + ch] = src[ch];
                        arg[i * c + ch] = r;
                    }
                }
            }
        }
        Ok(self.push(out, Op::GroupMax(a, arg)))
    }

    /// `1×c` column-wise maximum.
    pub fn col_max(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Mat::from_vec(1, va.cols, va.row(0).to_vec()).expect("row shape");
        let mut arg = vec![0usize; va.cols];
        for r in 1..va.rows {
            for (ch, &v) in va.row(r).iter().enumerate() {
                if v > out.data[ch] {
                    out.data[ch] = v;
                    arg[ch] = r;
                }
            }
        }
        self.push(out, Op::ColMax(a, arg))
    }

    /// Repeats a `1×c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let va = self.value(a);
        if va.rows != 1 {
            return Err(shape_err("broadcast_rows", va.shape(), (1, va.cols)));
        }
        let data = va.data.repeat(n);
        let out = Mat { rows: n, cols: va.cols, data };
        Ok(self.push(out, Op::BroadcastRows(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// `scores[i][j] + table[row][buckets[i·cols + j]]`.
    pub fn bucket_bias(&mut self, scores: Var, table: Var, row: usize, buckets: Rc<Vec<u8>>) -> Result<Var> {
        let (vs, vt) = (self.value(scores), self.value(table));
        if buckets.len() != vs.data.len() || row >= vt.rows {
            return Err(shape_err("bucket_bias", vs.shape(), vt.shape()));
        }
        if let Some(&b) = buckets.iter().find(|&&b| b as usize >= vt.cols) {
            return Err(Error::InternalConsistency(format!("bucket {b} outside table")));
        }
        let trow = vt.row(row);
        let mut out = vs.clone();
        for (o, &b) in out.data.iter_mut().zip(buckets.iter()) {
            *o += trow[b as usize];
        }
        Ok(self.push(out, Op::BucketBias { scores, table, row, buckets }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::scalar(s), Op::SumAll(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().map(|v| v * v).sum();
        self.push(Mat::scalar(s), Op::SumSquares(a))
    }

    /// `norm · (Σ_i min_j ‖p_i − q_j‖² + Σ_j min_i ‖p_i − q_j‖²)` for an
    /// `n×3` prediction against a constant target. Nearest partners are
    /// resolved with the lowest index on ties.
    pub fn chamfer(&mut self, pred: Var, target: Rc<Mat>, norm: f64) -> Result<Var> {
        let vp = self.value(pred);
        if vp.cols != 3 || target.cols != 3 || vp.rows == 0 || target.rows == 0 {
            return Err(shape_err("chamfer", vp.shape(), target.shape()));
        }
        let p = crate::geometry::PointCloud::new(rows_to_points(vp))?;
        let q = crate::geometry::PointCloud::new(rows_to_points(&target))?;
        let tp = crate::geometry::KdTree::build(&p);
        let tq = crate::geometry::KdTree::build(&q);
        let mut total = 0.0;
        let mut ab = Vec::with_capacity(p.len());
        for x in p.points() {
            let (j, d2) = tq.nearest(x);
            ab.push(j);
            total += d2;
        }
        let mut ba = Vec::with_capacity(q.len());
        for y in q.points() {
            let (i, d2) = tp.nearest(y);
            ba.push(i);
            total += d2;
        }
        Ok(self.push(Mat::scalar(norm * total), Op::Chamfer { pred, target, ab, ba, norm }))
    }

    /// `norm · Σ_(i,j) ‖x_i − x_j‖` over directed edges, or the squared norm.
    pub fn edge_norm(&mut self, field: Var, edges: Rc<Vec<(usize, usize)>>, squared: bool, norm: f64) -> Result<Var> {
        let v = self.value(field);
        if edges.iter().any(|&(i, j)| i >= v.rows || j >= v.rows) {
            return Err(Error::InternalConsistency("edge endpoint out of range".into()));
        }
        let mut total = 0.0;
        for &(i, j) in edges.iter() {
            let s: f64 = v.row(i).iter().zip(v.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            total += if squared { s } else { s.sqrt() };
        }
        Ok(self.push(Mat::scalar(norm * total), Op::EdgeNorm { field, edges, squared, norm }))
    }

    /// Reverse sweep from the `1×1` node `out`.
    pub fn backward(&self, out: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::scalar(1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let acc = |grads: &mut [Option<Mat>], v: Var, dm: Mat| match &mut grads[v.0] {
            Some(e) => e.add_assign(&dm),
            slot @ None => *slot = Some(dm),
        };
        let zeros_like = |v: Var| {
            let (r, c) = self.shape(v);
            Mat::zeros(r, c)
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.matmul_t(vb));
                let mut db = zeros_like(*b);
                matmul_tn_acc(va, g, &mut db);
                acc(grads, *b, db);
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.matmul(vb));
                let mut db = zeros_like(*b);
                matmul_tn_acc(g, va, &mut db);
                acc(grads, *b, db);
            }
            Op::AddRow(a, b) => {
                let mut db = zeros_like(*b);
                for r in 0..g.rows {
                    for (d, x) in db.data.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                acc(grads, *a, g.clone());
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                let mut n = g.clone();
                n.data.iter_mut().for_each(|v| *v = -*v);
                acc(grads, *b, n);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = Mat { rows: g.rows, cols: g.cols, data: g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect() };
                let db = Mat { rows: g.rows, cols: g.cols, data: g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect() };
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.data.iter_mut().for_each(|v| *v *= s);
                acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let y = &node.value;
                let d = g.data.iter().zip(&y.data).map(|(x, v)| if *v > 0.0 { *x } else { 0.0 }).collect();
                acc(grads, *a, Mat { rows: g.rows, cols: g.cols, data: d });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = g.data.iter().zip(&y.data).map(|(x, v)| x * (1.0 - v * v)).collect();
                acc(grads, *a, Mat { rows: g.rows, cols: g.cols, data: d });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g.data.iter().zip(&y.data).map(|(x, v)| x * v * (1.0 - v)).collect();
                acc(grads, *a, Mat { rows: g.rows, cols: g.cols, data: d });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    let mut d = Mat::zeros(g.rows, w);
                    for r in 0..g.rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    acc(grads, p, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let d = Mat { rows: r, cols: c, data: g.data[off * c..(off + r) * c].to_vec() };
                    off += r;
                    acc(grads, p, d);
                }
            }
            Op::SliceCols(a, start) => {
                let mut d = zeros_like(*a);
                for r in 0..g.rows {
                    d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let mut d = zeros_like(*a);
                for (r, &i) in idx.iter().enumerate() {
                    for (x, y) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                acc(grads, *a, d);
            }
            Op::RowScale(a, w) => {
                let mut d = g.clone();
                for (r, s) in w.iter().enumerate() {
                    d.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                acc(grads, *a, d);
            }
            Op::GroupSum(a, gsz) => {
                let mut d = zeros_like(*a);
                for r in 0..d.rows {
                    d.row_mut(r).copy_from_slice(g.row(r / gsz));
                }
                acc(grads, *a, d);
            }
            Op::GroupMax(a, arg) => {
                let mut d = zeros_like(*a);
                let c = g.cols;
                for (flat, &src) in arg.iter().enumerate() {
                    d.data[src * c + flat % c] += g.data[flat];
                }
                acc(grads, *a, d);
            }
            Op::ColMax(a, arg) => {
                let mut d = zeros_like(*a);
                let c = g.cols;
                for (ch, &src) in arg.iter().enumerate() {
                    d.data[src * c + ch] += g.data[ch];
                }
                acc(grads, *a, d);
            }
            Op::BroadcastRows(a) => {
                let mut d = zeros_like(*a);
                for r in 0..g.rows {
                    for (x, y) in d.data.iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Mat::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for ((o, yv), gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - s);
                    }
                }
                acc(grads, *a, d);
            }
            Op::BucketBias { scores, table, row, buckets } => {
                let mut dt = zeros_like(*table);
                let c = dt.cols;
                for (gv, &b) in g.data.iter().zip(buckets.iter()) {
                    dt.data[row * c + b as usize] += gv;
                }
                acc(grads, *scores, g.clone());
                acc(grads, *table, dt);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                acc(grads, *a, Mat { rows: r, cols: c, data: vec![g.data[0]; r * c] });
            }
            Op::SumSquares(a) => {
                let va = self.value(*a);
                let s = 2.0 * g.data[0];
                acc(grads, *a, Mat { rows: va.rows, cols: va.cols, data: va.data.iter().map(|v| s * v).collect() });
            }
            Op::Chamfer { pred, target, ab, ba, norm } => {
                let vp = self.value(*pred);
                let mut d = zeros_like(*pred);
                let s = 2.0 * norm * g.data[0];
                for (i, &j) in ab.iter().enumerate() {
                    for c in 0..3 {
                        d.data[i * 3 + c] += s * (vp.get(i, c) - target.get(j, c));
                    }
                }
                for (j, &i) in ba.iter().enumerate() {
                    for c in 0..3 {
                        d.data[i * 3 + c] += s * (vp.get(i, c) - target.get(j, c));
                    }
                }
                acc(grads, *pred, d);
            }
            Op::EdgeNorm { field, edges, squared, norm } => {
                let v = self.value(*field);
                let mut d = zeros_like(*field);
                let s = norm * g.data[0];
                let c = v.cols;
                for &(i, j) in edges.iter() {
                    let diff: Vec<f64> = v.row(i).iter().zip(v.row(j)).map(|(a, b)| a - b).collect();
                    let f = if *squared {
                        2.0
                    } else {
                        let len = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if len == 0.0 {
                            continue;
                        }
                        1.0 / len
                    };
                    for (ch, x) in diff.iter().enumerate() {
                        d.data[i * c + ch] += s * f * x;
                        d.data[j * c + ch] -= s * f * x;
                    }
                }
                acc(grads, *field, d);
            }
        }
    }
}

fn rows_to_points(m: &Mat) -> Vec<crate::geometry::Point3> {
    (0..m.rows).map(|r| crate::geometry::Point3::new(m.get(r, 0), m.get(r, 1), m.get(r, 2))).collect()
}
