//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar node with respect to every node that requires one. Parameters enter
//! the tape by name through [`Graph::param`] so their gradients can be
//! collected into a [`Gradients`] map afterwards.

use std::collections::{BTreeMap, HashMap};

use super::tensor::{Mat, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulScalarVar(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Gelu(usize),
    Relu(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    /// aux: per-row inverse standard deviation.
    LayerNorm(usize),
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Gather(usize, Vec<usize>),
    SumAll(usize),
    MeanRows(usize),
    SumCols(usize),
    Transpose(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
    aux: Vec<f64>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

/// `C = op(A) * op(B)` with optional transposes expressed through strides.
pub(crate) fn gemm(a: &Mat, ta: bool, b: &Mat, tb: bool) -> Mat {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimension");
    let mut c = Mat::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    if m * n * k <= SMALL_GEMM {
        small_gemm(a, ta, b, tb, &mut c, k);
        return c;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents describe exactly the buffers of `a`, `b`, `c`.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.data.as_ptr(), rsa, csa,
            b.data.as_ptr(), rsb, csb,
            0.0,
            c.data.as_mut_ptr(), n as isize, 1,
        );
    }
    c
}

/// Below this many multiply-adds the packing overhead of the blocked kernel dominates.
const SMALL_GEMM: usize = 32 * 32 * 32;

fn small_gemm(a: &Mat, ta: bool, b: &Mat, tb: bool, c: &mut Mat, k: usize) {
    let n = c.cols;
    let bt;
    let b_rows: &[f64] = if tb {
        let mut t = vec![0.0; b.data.len()];
        for r in 0..b.rows {
            for col in 0..b.cols {
                t[col * b.rows + r] = b.data[r * b.cols + col];
            }
        }
        bt = t;
        &bt
    } else {
        &b.data
    };
    for i in 0..c.rows {
        let out = &mut c.data[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if ta { a.data[p * a.cols + i] } else { a.data[i * a.cols + p] };
            let brow = &b_rows[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    Mat { rows: a.rows, cols: a.cols, data: a.data.iter().map(|&x| f(x)).collect() }
}

fn zip(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat { rows: a.rows, cols: a.cols, data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
}

fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for r in out.data.chunks_mut(a.cols) {
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in r.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in r.iter_mut() {
            *x /= sum;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
    consts: HashMap<String, usize>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.push_aux(value, op, requires_grad, Vec::new())
    }

    fn push_aux(&mut self, value: Mat, op: Op, requires_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, aux });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked but which is not a named parameter.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A named trainable parameter. Repeated calls with the same name return
    /// the same node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&i) = self.params.get(name) {
            return Var(i);
        }
        let v = self.push(t.to_mat(), Op::Leaf, true);
        self.params.insert(name.to_string(), v.0);
        v
    }

    /// A named constant, cached like [`Graph::param`] but without gradient.
    pub fn named_constant(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&i) = self.consts.get(name) {
            return Var(i);
        }
        let v = self.push(t.to_mat(), Op::Leaf, false);
        self.consts.insert(name.to_string(), v.0);
        v
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !x.same_shape(y) {
            return Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                x.rows, x.cols, y.rows, y.cols
            )));
        }
        Ok(())
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let k1 = if ta { x.rows } else { x.cols };
        let k2 = if tb { y.cols } else { y.rows };
        if k1 != k2 {
            return Err(Error::shape(format!(
                "matmul: {}x{}{} by {}x{}{}",
                x.rows, x.cols, if ta { "ᵀ" } else { "" },
                y.rows, y.cols, if tb { "ᵀ" } else { "" }
            )));
        }
        let value = gemm(x, ta, y, tb);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a * bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let value = zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let value = zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::Sub(a.0, b.0), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let value = zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    fn check_row(&self, a: Var, row: Var, what: &str) -> Result<()> {
        let (x, r) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if r.rows != 1 || r.cols != x.cols {
            return Err(Error::shape(format!("{what}: row {}x{} for {}x{}", r.rows, r.cols, x.rows, x.cols)));
        }
        Ok(())
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "add_row")?;
        let (x, r) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let mut value = x.clone();
        for chunk in value.data.chunks_mut(x.cols) {
            for (v, &b) in chunk.iter_mut().zip(&r.data) {
                *v += b;
            }
        }
        let rg = self.rg(&[a.0, row.0]);
        Ok(self.push(value, Op::AddRow(a.0, row.0), rg))
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "mul_row")?;
        let (x, r) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let mut value = x.clone();
        for chunk in value.data.chunks_mut(x.cols) {
            for (v, &b) in chunk.iter_mut().zip(&r.data) {
                *v *= b;
            }
        }
        let rg = self.rg(&[a.0, row.0]);
        Ok(self.push(value, Op::MulRow(a.0, row.0), rg))
    }

    /// `s * a` for a `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = &self.nodes[s.0].value;
        if sv.len() != 1 {
            return Err(Error::shape("mul_scalar: scale must be 1x1"));
        }
        let k = sv.data[0];
        let value = map(&self.nodes[a.0].value, |x| x * k);
        let rg = self.rg(&[a.0, s.0]);
        Ok(self.push(value, Op::MulScalarVar(a.0, s.0), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = map(&self.nodes[a.0].value, |x| x * k);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Scale(a.0, k), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let value = map(&self.nodes[a.0].value, |x| x + k);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::AddConst(a.0), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = map(&self.nodes[a.0].value, f);
        let rg = self.rg(&[a.0]);
        self.push(value, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    /// Natural log. Callers clamp first where inputs may reach zero.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a.0), gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a.0, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.clamp(a, lo, f64::INFINITY)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(&self.nodes[a.0].value);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::SoftmaxRows(a.0), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        for r in value.data.chunks_mut(x.cols) {
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in r.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[a.0]);
        self.push(value, Op::LogSoftmaxRows(a.0), rg)
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + 1e-5)`, no affine part.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let n = x.cols as f64;
        let mut value = x.clone();
        let mut inv = Vec::with_capacity(x.rows);
        for r in value.data.chunks_mut(x.cols) {
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for v in r.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv.push(is);
        }
        let rg = self.rg(&[a.0]);
        self.push_aux(value, Op::LayerNorm(a.0), rg, inv)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if start + len > x.cols || len == 0 {
            return Err(Error::shape(format!("slice_cols {start}+{len} of {}", x.cols)));
        }
        let mut data = Vec::with_capacity(x.rows * len);
        for r in 0..x.rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let value = Mat { rows: x.rows, cols: len, data };
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::SliceCols { a: a.0, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if start + len > x.rows || len == 0 {
            return Err(Error::shape(format!("slice_rows {start}+{len} of {}", x.rows)));
        }
        let data = x.data[start * x.cols..(start + len) * x.cols].to_vec();
        let value = Mat { rows: len, cols: x.cols, data };
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::SliceRows { a: a.0, start }, rg))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.slice_rows(a, r, 1)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|p| self.nodes[p.0].value.rows).ok_or_else(|| Error::shape("concat of nothing"))?;
        if parts.iter().any(|p| self.nodes[p.0].value.rows != rows) {
            return Err(Error::shape("concat_cols: row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Mat { rows, cols, data }, Op::ConcatCols(ids), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|p| self.nodes[p.0].value.cols).ok_or_else(|| Error::shape("concat of nothing"))?;
        if parts.iter().any(|p| self.nodes[p.0].value.cols != cols) {
            return Err(Error::shape("concat_rows: column counts differ"));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let rows = data.len() / cols;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Mat { rows, cols, data }, Op::ConcatRows(ids), rg))
    }

    /// Picks elements by flat row-major index into a `1 x n` row.
    pub fn gather(&mut self, a: Var, flat: Vec<usize>) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if let Some(&bad) = flat.iter().find(|&&i| i >= x.len()) {
            return Err(Error::IndexOutOfRange { index: bad, len: x.len() });
        }
        let value = Mat::row_vector(flat.iter().map(|&i| x.data[i]).collect());
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Gather(a.0, flat), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(&[a.0]);
        self.push(Mat::scalar(s), Op::SumAll(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut data = vec![0.0; x.cols];
        for r in 0..x.rows {
            for (d, v) in data.iter_mut().zip(x.row(r)) {
                *d += v;
            }
        }
        let n = x.rows as f64;
        data.iter_mut().for_each(|d| *d /= n);
        let rg = self.rg(&[a.0]);
        self.push(Mat::row_vector(data), Op::MeanRows(a.0), rg)
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let data = (0..x.rows).map(|r| x.row(r).iter().sum()).collect();
        let value = Mat { rows: x.rows, cols: 1, data };
        let rg = self.rg(&[a.0]);
        self.push(value, Op::SumCols(a.0), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = Mat::zeros(x.cols, x.rows);
        for r in 0..x.rows {
            for c in 0..x.cols {
                value.data[c * x.rows + r] = x.data[r * x.cols + c];
            }
        }
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Transpose(a.0), rg)
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::shape(format!("backward needs a scalar, got {}x{}", lv.rows, lv.cols)));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, i: usize, dy: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |k: usize| &self.nodes[k].value;
        let mut acc = |k: usize, g: Mat| {
            if !self.nodes[k].requires_grad {
                return;
            }
            match &mut grads[k] {
                Some(existing) => {
                    for (e, v) in existing.data.iter_mut().zip(&g.data) {
                        *e += v;
                    }
                }
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                if self.nodes[a].requires_grad {
                    let da = if ta { gemm(val(b), tb, dy, true) } else { gemm(dy, false, val(b), !tb) };
                    acc(a, da);
                }
                if self.nodes[b].requires_grad {
                    let db = if tb { gemm(dy, true, val(a), ta) } else { gemm(val(a), !ta, dy, false) };
                    acc(b, db);
                }
            }
            &Op::Add(a, b) => {
                acc(a, dy.clone());
                acc(b, dy.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, dy.clone());
                acc(b, map(dy, |g| -g));
            }
            &Op::Mul(a, b) => {
                acc(a, zip(dy, val(b), |g, y| g * y));
                acc(b, zip(dy, val(a), |g, x| g * x));
            }
            &Op::AddRow(a, r) => {
                acc(a, dy.clone());
                let mut dr = vec![0.0; dy.cols];
                for row in dy.data.chunks(dy.cols) {
                    for (d, g) in dr.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                acc(r, Mat::row_vector(dr));
            }
            &Op::MulRow(a, r) => {
                let (x, rv) = (val(a), val(r));
                let mut da = dy.clone();
                let mut dr = vec![0.0; dy.cols];
                for (row_idx, chunk) in da.data.chunks_mut(dy.cols).enumerate() {
                    let xr = x.row(row_idx);
                    for c in 0..dy.cols {
                        dr[c] += chunk[c] * xr[c];
                        chunk[c] *= rv.data[c];
                    }
                }
                acc(a, da);
                acc(r, Mat::row_vector(dr));
            }
            &Op::MulScalarVar(a, s) => {
                let k = val(s).data[0];
                acc(a, map(dy, |g| g * k));
                let ds: f64 = dy.data.iter().zip(&val(a).data).map(|(g, x)| g * x).sum();
                acc(s, Mat::scalar(ds));
            }
            &Op::Scale(a, k) => acc(a, map(dy, |g| g * k)),
            &Op::AddConst(a) => acc(a, dy.clone()),
            &Op::Exp(a) => acc(a, zip(dy, y, |g, e| g * e)),
            &Op::Log(a) => acc(a, zip(dy, val(a), |g, x| g / x)),
            &Op::Tanh(a) => acc(a, zip(dy, y, |g, t| g * (1.0 - t * t))),
            &Op::Sigmoid(a) => acc(a, zip(dy, y, |g, s| g * s * (1.0 - s))),
            &Op::Gelu(a) => acc(a, zip(dy, val(a), |g, x| g * gelu_grad(x))),
            &Op::Relu(a) => acc(a, zip(dy, val(a), |g, x| if x > 0.0 { g } else { 0.0 })),
            &Op::Square(a) => acc(a, zip(dy, val(a), |g, x| 2.0 * g * x)),
            &Op::Clamp(a, lo, hi) => acc(a, zip(dy, val(a), |g, x| if x < lo || x > hi { 0.0 } else { g })),
            &Op::SoftmaxRows(a) => {
                let mut da = dy.clone();
                for (r, chunk) in da.data.chunks_mut(dy.cols).enumerate() {
                    let yr = y.row(r);
                    let dot: f64 = chunk.iter().zip(yr).map(|(g, s)| g * s).sum();
                    for (g, s) in chunk.iter_mut().zip(yr) {
                        *g = s * (*g - dot);
                    }
                }
                acc(a, da);
            }
            &Op::LogSoftmaxRows(a) => {
                let mut da = dy.clone();
                for (r, chunk) in da.data.chunks_mut(dy.cols).enumerate() {
                    let yr = y.row(r);
                    let total: f64 = chunk.iter().sum();
                    for (g, l) in chunk.iter_mut().zip(yr) {
                        *g -= l.exp() * total;
                    }
                }
                acc(a, da);
            }
            &Op::LayerNorm(a) => {
                let n = dy.cols as f64;
                let mut da = dy.clone();
                for (r, chunk) in da.data.chunks_mut(dy.cols).enumerate() {
                    let yr = y.row(r);
                    let mean_g = chunk.iter().sum::<f64>() / n;
                    let mean_gy = chunk.iter().zip(yr).map(|(g, v)| g * v).sum::<f64>() / n;
                    let is = node.aux[r];
                    for (g, v) in chunk.iter_mut().zip(yr) {
                        *g = is * (*g - mean_g - v * mean_gy);
                    }
                }
                acc(a, da);
            }
            &Op::SliceCols { a, start } => {
                let x = val(a);
                let mut da = Mat::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    da.data[r * x.cols + start..r * x.cols + start + dy.cols].copy_from_slice(dy.row(r));
                }
                acc(a, da);
            }
            &Op::SliceRows { a, start } => {
                let x = val(a);
                let mut da = Mat::zeros(x.rows, x.cols);
                da.data[start * x.cols..start * x.cols + dy.len()].copy_from_slice(&dy.data);
                acc(a, da);
            }
            Op::ConcatCols(ids) => {
                let mut offset = 0;
                for &k in ids {
                    let w = val(k).cols;
                    let mut part = Vec::with_capacity(dy.rows * w);
                    for r in 0..dy.rows {
                        part.extend_from_slice(&dy.row(r)[offset..offset + w]);
                    }
                    acc(k, Mat { rows: dy.rows, cols: w, data: part });
                    offset += w;
                }
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for &k in ids {
                    let n = val(k).len();
                    let x = val(k);
                    acc(k, Mat { rows: x.rows, cols: x.cols, data: dy.data[offset..offset + n].to_vec() });
                    offset += n;
                }
            }
            Op::Gather(a, flat) => {
                let x = val(*a);
                let mut da = Mat::zeros(x.rows, x.cols);
                for (&idx, g) in flat.iter().zip(&dy.data) {
                    da.data[idx] += g;
                }
                acc(*a, da);
            }
            &Op::SumAll(a) => {
                let x = val(a);
                acc(a, Mat::filled(x.rows, x.cols, dy.data[0]));
            }
            &Op::MeanRows(a) => {
                let x = val(a);
                let n = x.rows as f64;
                let mut da = Mat::zeros(x.rows, x.cols);
                for chunk in da.data.chunks_mut(x.cols) {
                    for (d, g) in chunk.iter_mut().zip(&dy.data) {
                        *d = g / n;
                    }
                }
                acc(a, da);
            }
            &Op::SumCols(a) => {
                let x = val(a);
                let mut da = Mat::zeros(x.rows, x.cols);
                for (r, chunk) in da.data.chunks_mut(x.cols).enumerate() {
                    chunk.iter_mut().for_each(|d| *d = dy.data[r]);
                }
                acc(a, da);
            }
            &Op::Transpose(a) => {
                let mut da = Mat::zeros(dy.cols, dy.rows);
                for r in 0..dy.rows {
                    for c in 0..dy.cols {
                        da.data[c * dy.rows + r] = dy.data[r * dy.cols + c];
                    }
                }
                acc(a, da);
            }
        }
    }

    /// Names of the parameters registered on this graph.
    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v` (`None` when unreached).
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every named parameter on `graph`; parameters the loss
    /// does not reach get zeros.
    pub fn params(&self, graph: &Graph) -> Gradients {
        let mut map = BTreeMap::new();
        for (name, &idx) in &graph.params {
            let g = match &self.grads[idx] {
                Some(m) => m.data.clone(),
                None => vec![0.0; graph.nodes[idx].value.len()],
            };
            map.insert(name.clone(), g);
        }
        Gradients(map)
    }
}

/// Parameter path to flat gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<String, Vec<f64>>);

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, path: &str) -> Option<&Vec<f64>> {
        self.0.get(path)
    }

    /// Elementwise accumulation.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (k, g) in &other.0 {
            match self.0.get_mut(k) {
                Some(e) => e.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.0.insert(k.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.0.values_mut() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// Entries under `prefix`, prefix stripped.
    pub fn sub_set(&self, prefix: &str) -> Gradients {
        Gradients(
            self.0
                .iter()
                .filter_map(|(k, g)| k.strip_prefix(prefix).map(|s| (s.to_string(), g.clone())))
                .collect(),
        )
    }

    pub fn norm(&self) -> f64 {
        self.0.values().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}
