//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records each primitive as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse creation order, which is a
//! valid reverse topological order because every node only references
//! earlier nodes. Gradients from multiple consumers accumulate additively.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::matrix::{axpy, dot, matmul_nn_acc, matmul_nt, matmul_tn_acc, Matrix};
use super::params::{ParamStore, Tensor};
use crate::error::{arg_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMulNt(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Pick(Var, Vec<usize>),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    PairSum(Var, Var, usize),
    BlockMatMul(Var, Var, usize),
    GroupSumRows(Var, usize),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Recording of a computation for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<(String, Var, Vec<usize>)>,
    grads: Vec<Option<Matrix>>,
}

fn check_same(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(arg_err!(
            "{}: shape {:?} vs {:?}",
            what,
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives no parameter gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds the named parameter; repeated bindings share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some((_, v, _)) = self.bound.iter().find(|(n, _, _)| n == name) {
            return Ok(*v);
        }
        let tensor = store.require(name)?;
        let var = self.push(tensor.to_matrix(), Op::Leaf);
        self.bound
            .push((name.to_string(), var, tensor.shape().to_vec()));
        Ok(var)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(arg_err!("matmul_nt: {:?} · {:?}ᵀ", va.shape(), vb.shape()));
        }
        let out = matmul_nt(va, vb);
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(arg_err!("matmul: {:?} · {:?}", va.shape(), vb.shape()));
        }
        let mut out = Matrix::zeros(va.rows(), vb.cols());
        matmul_nn_acc(va, vb, &mut out);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.rows() != 1 || vr.cols() != vx.cols() {
            return Err(arg_err!("add_row: {:?} + row {:?}", vx.shape(), vr.shape()));
        }
        let mut out = vx.clone();
        let r = vr.row(0).to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += *b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "sub")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o -= *v;
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "mul")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= *v;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Scales row `r` of `x` by `c[r]` for a column `c`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (vx, vc) = (self.value(x), self.value(c));
        if vc.cols() != 1 || vc.rows() != vx.rows() {
            return Err(arg_err!(
                "mul_col: {:?} * column {:?}",
                vx.shape(),
                vc.shape()
            ));
        }
        let mut out = vx.clone();
        for r in 0..out.rows() {
            let s = vc.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|o| *o *= s);
        }
        Ok(self.push(out, Op::MulCol(x, c)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v + k);
        self.push(out, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(libm::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(libm::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = vx.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmaxRows(x))
    }

    /// Picks `x[r, idx[r]]` per row into a column.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        if idx.len() != vx.rows() {
            return Err(arg_err!(
                "pick: {} indices for {} rows",
                idx.len(),
                vx.rows()
            ));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= vx.cols()) {
            return Err(arg_err!("pick: column {} out of {}", bad, vx.cols()));
        }
        let out =
            Matrix::column_vector(idx.iter().enumerate().map(|(r, &c)| vx.get(r, c)).collect());
        Ok(self.push(out, Op::Pick(x, idx)))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(x, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "minimum")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            if *v < *o {
                *o = *v;
            }
        }
        Ok(self.push(out, Op::Minimum(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s: f64 = vx.data().iter().sum::<f64>() / vx.len().max(1) as f64;
        self.push(Matrix::scalar(s), Op::Mean(x))
    }

    /// Row sums as a column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Matrix::column_vector((0..vx.rows()).map(|r| vx.row(r).iter().sum()).collect());
        self.push(out, Op::SumCols(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| arg_err!("concat_cols: no inputs"))?;
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(arg_err!("concat_cols: row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.nodes[p.0].value.row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Row `k` of the output is row `idx[k]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(bad) = idx.iter().find(|&&i| i >= vx.rows()) {
            return Err(arg_err!("gather_rows: row {} out of {}", bad, vx.rows()));
        }
        let mut out = Matrix::zeros(idx.len(), vx.cols());
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(vx.row(i));
        }
        Ok(self.push(out, Op::GatherRows(x, idx)))
    }

    /// For columns `src`, `dst` of `G·n` rows grouped in blocks of `n`,
    /// returns the `G·n x n` matrix `out[g·n+i, j] = src[g·n+i] + dst[g·n+j]`.
    pub fn pair_sum(&mut self, src: Var, dst: Var, n: usize) -> Result<Var> {
        let (vs, vd) = (self.value(src), self.value(dst));
        if vs.cols() != 1 || vs.shape() != vd.shape() || n == 0 || vs.rows() % n != 0 {
            return Err(arg_err!(
                "pair_sum: {:?}, {:?} with group {}",
                vs.shape(),
                vd.shape(),
                n
            ));
        }
        let mut out = Matrix::zeros(vs.rows(), n);
        for g in 0..vs.rows() / n {
            for i in 0..n {
                let s = vs.get(g * n + i, 0);
                for j in 0..n {
                    out.set(g * n + i, j, s + vd.get(g * n + j, 0));
                }
            }
        }
        Ok(self.push(out, Op::PairSum(src, dst, n)))
    }

    /// Blockwise `alpha · v`: `out[g·n+i] = Σ_j alpha[g·n+i, j] · v[g·n+j]`.
    pub fn block_matmul(&mut self, alpha: Var, v: Var, n: usize) -> Result<Var> {
        let (va, vv) = (self.value(alpha), self.value(v));
        if va.cols() != n || va.rows() != vv.rows() || n == 0 || va.rows() % n != 0 {
            return Err(arg_err!(
                "block_matmul: {:?} · {:?} with group {}",
                va.shape(),
                vv.shape(),
                n
            ));
        }
        let mut out = Matrix::zeros(vv.rows(), vv.cols());
        for g in 0..va.rows() / n {
            for i in 0..n {
                for j in 0..n {
                    let w = va.get(g * n + i, j);
                    let src = vv.row(g * n + j);
                    axpy(w, src, out.row_mut(g * n + i));
                }
            }
        }
        Ok(self.push(out, Op::BlockMatMul(alpha, v, n)))
    }

    /// Sums each block of `n` consecutive rows.
    pub fn group_sum_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let vx = self.value(x);
        if n == 0 || vx.rows() % n != 0 {
            return Err(arg_err!("group_sum_rows: {} rows, group {}", vx.rows(), n));
        }
        let mut out = Matrix::zeros(vx.rows() / n, vx.cols());
        for r in 0..vx.rows() {
            axpy(1.0, vx.row(r), out.row_mut(r / n));
        }
        Ok(self.push(out, Op::GroupSumRows(x, n)))
    }

    /// Signature of which side of every kink (ReLU, LeakyReLU, clamp,
    /// minimum) each element sits on. Two evaluations with equal
    /// signatures are in the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |code: u8| {
            h ^= u64::from(code);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        let side = |v: f64, at: f64| -> u8 {
            if v > at {
                2
            } else if v < at {
                0
            } else {
                1
            }
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    for &v in self.nodes[x.0].value.data() {
                        feed(side(v, 0.0));
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    for &v in self.nodes[x.0].value.data() {
                        feed(side(v, *lo) * 3 + side(v, *hi));
                    }
                }
                Op::Minimum(a, b) => {
                    let vb = self.nodes[b.0].value.data();
                    for (&x, &y) in self.nodes[a.0].value.data().iter().zip(vb) {
                        feed(side(x, y));
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Back-propagates from the scalar `output` and returns the gradients
    /// of every bound parameter, shaped like the stored tensors.
    pub fn backward(&mut self, output: Var) -> Result<ParamStore> {
        if self.value(output).shape() != (1, 1) {
            return Err(arg_err!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = ParamStore::new();
        for (name, var, shape) in &self.bound {
            let data = match &grads[var.0] {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; shape.iter().product()],
            };
            out.set(name, Tensor::new(shape.clone(), data)?);
        }
        self.grads = grads;
        Ok(out)
    }

    /// Gradient of the last backward pass with respect to any node.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMulNt(a, b) => {
                let (va, vb) = (val(a), val(b));
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                matmul_nn_acc(g, vb, &mut ga);
                let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                matmul_tn_acc(g, va, &mut gb);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let ga = matmul_nt(g, vb);
                let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                matmul_tn_acc(va, g, &mut gb);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::AddRow(x, r) => {
                let mut gr = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    axpy(1.0, g.row(i), gr.row_mut(0));
                }
                acc(*x, g.clone());
                acc(*r, gr);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let mut ga = g.clone();
                ga.data_mut()
                    .iter_mut()
                    .zip(vb.data())
                    .for_each(|(x, y)| *x *= *y);
                let mut gb = g.clone();
                gb.data_mut()
                    .iter_mut()
                    .zip(va.data())
                    .for_each(|(x, y)| *x *= *y);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::MulCol(x, c) => {
                let (vx, vc) = (val(x), val(c));
                let mut gx = g.clone();
                let mut gc = Matrix::zeros(vc.rows(), 1);
                for r in 0..g.rows() {
                    let s = vc.get(r, 0);
                    gx.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    gc.set(r, 0, dot(g.row(r), vx.row(r)));
                }
                acc(*x, gx);
                acc(*c, gc);
            }
            Op::Scale(x, k) => acc(*x, g.map(|v| v * k)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Tanh(x) => {
                let mut gx = g.clone();
                gx.data_mut()
                    .iter_mut()
                    .zip(node.value.data())
                    .for_each(|(d, y)| *d *= 1.0 - y * y);
                acc(*x, gx);
            }
            Op::Relu(x) => {
                let mut gx = g.clone();
                gx.data_mut()
                    .iter_mut()
                    .zip(val(x).data())
                    .for_each(|(d, v)| {
                        if *v <= 0.0 {
                            *d = 0.0
                        }
                    });
                acc(*x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let mut gx = g.clone();
                gx.data_mut()
                    .iter_mut()
                    .zip(val(x).data())
                    .for_each(|(d, v)| {
                        if *v <= 0.0 {
                            *d *= slope
                        }
                    });
                acc(*x, gx);
            }
            Op::Exp(x) => {
                let mut gx = g.clone();
                gx.data_mut()
                    .iter_mut()
                    .zip(node.value.data())
                    .for_each(|(d, y)| *d *= y);
                acc(*x, gx);
            }
            Op::Square(x) => {
                let mut gx = g.clone();
                gx.data_mut()
                    .iter_mut()
                    .zip(val(x).data())
                    .for_each(|(d, v)| *d *= 2.0 * v);
                acc(*x, gx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let s = dot(g.row(r), y.row(r));
                    let yr = y.row(r);
                    gx.row_mut(r)
                        .iter_mut()
                        .zip(yr)
                        .for_each(|(d, p)| *d = p * (*d - s));
                }
                acc(*x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let s: f64 = g.row(r).iter().sum();
                    let yr = y.row(r);
                    gx.row_mut(r)
                        .iter_mut()
                        .zip(yr)
                        .for_each(|(d, ly)| *d -= libm::exp(*ly) * s);
                }
                acc(*x, gx);
            }
            Op::Pick(x, idx) => {
                let vx = val(x);
                let mut gx = Matrix::zeros(vx.rows(), vx.cols());
                for (r, &c) in idx.iter().enumerate() {
                    gx.set(r, c, g.get(r, 0));
                }
                acc(*x, gx);
            }
            Op::Clamp(x, lo, hi) => {
                let mut gx = g.clone();
                gx.data_mut()
                    .iter_mut()
                    .zip(val(x).data())
                    .for_each(|(d, v)| {
                        if !(*v > *lo && *v < *hi) {
                            *d = 0.0
                        }
                    });
                acc(*x, gx);
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(a), val(b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                for ((da, db), (x, y)) in ga
                    .data_mut()
                    .iter_mut()
                    .zip(gb.data_mut().iter_mut())
                    .zip(va.data().iter().zip(vb.data()))
                {
                    if x <= y {
                        *db = 0.0;
                    } else {
                        *da = 0.0;
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Sum(x) => {
                let vx = val(x);
                acc(*x, Matrix::filled(vx.rows(), vx.cols(), g.get(0, 0)));
            }
            Op::Mean(x) => {
                let vx = val(x);
                let k = g.get(0, 0) / vx.len().max(1) as f64;
                acc(*x, Matrix::filled(vx.rows(), vx.cols(), k));
            }
            Op::SumCols(x) => {
                let vx = val(x);
                let mut gx = Matrix::zeros(vx.rows(), vx.cols());
                for r in 0..vx.rows() {
                    let d = g.get(r, 0);
                    gx.row_mut(r).iter_mut().for_each(|v| *v = d);
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(p).cols();
                    let mut gp = Matrix::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    acc(*p, gp);
                }
            }
            Op::GatherRows(x, idx) => {
                let vx = val(x);
                let mut gx = Matrix::zeros(vx.rows(), vx.cols());
                for (k, &i) in idx.iter().enumerate() {
                    axpy(1.0, g.row(k), gx.row_mut(i));
                }
                acc(*x, gx);
            }
            Op::PairSum(src, dst, n) => {
                let n = *n;
                let rows = g.rows();
                let mut gs = Matrix::zeros(rows, 1);
                let mut gd = Matrix::zeros(rows, 1);
                for grp in 0..rows / n {
                    for i in 0..n {
                        let r = grp * n + i;
                        gs.set(r, 0, g.row(r).iter().sum());
                        for j in 0..n {
                            let t = gd.get(grp * n + j, 0);
                            gd.set(grp * n + j, 0, t + g.get(r, j));
                        }
                    }
                }
                acc(*src, gs);
                acc(*dst, gd);
            }
            Op::BlockMatMul(alpha, v, n) => {
                let n = *n;
                let (va, vv) = (val(alpha), val(v));
                let mut galpha = Matrix::zeros(va.rows(), va.cols());
                let mut gv = Matrix::zeros(vv.rows(), vv.cols());
                for grp in 0..va.rows() / n {
                    for i in 0..n {
                        let r = grp * n + i;
                        for j in 0..n {
                            galpha.set(r, j, dot(g.row(r), vv.row(grp * n + j)));
                            axpy(va.get(r, j), g.row(r), gv.row_mut(grp * n + j));
                        }
                    }
                }
                acc(*alpha, galpha);
                acc(*v, gv);
            }
            Op::GroupSumRows(x, n) => {
                let vx = val(x);
                let mut gx = Matrix::zeros(vx.rows(), vx.cols());
                for r in 0..vx.rows() {
                    gx.row_mut(r).copy_from_slice(g.row(r / n));
                }
                acc(*x, gx);
            }
        }
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + libm::log(x.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Softmax of one vector, stabilized by max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut v = logits.to_vec();
    softmax_in_place(&mut v);
    v
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Matrix) {
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = build(&mut tape, x);
        tape.backward(y).unwrap();
        let analytic = tape
            .grad(x)
            .cloned()
            .unwrap_or(Matrix::zeros(x0.rows(), x0.cols()));
        let h = 1e-6;
        for k in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[k] += delta;
                let mut t = Tape::new();
                let xv = t.constant(xp);
                let out = build(&mut t, xv);
                t.scalar(out)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[k];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + a.abs()),
                "coord {k}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn softmax_basic_cases() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[libm::log(0.9), libm::log(0.1) + 0.2]);
        assert!((p[0] - 0.88051).abs() < 1e-4);
        assert!((p[1] - 0.11949).abs() < 1e-4);
        let shifted = softmax(&[1.0 + 7.5, -2.0 + 7.5, 0.3 + 7.5]);
        let base = softmax(&[1.0, -2.0, 0.3]);
        for (a, b) in shifted.iter().zip(&base) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn elementwise_gradients() {
        let x0 = m(2, 3, &[0.3, -0.7, 1.1, 0.2, -0.4, 0.9]);
        fd_check(
            |t, x| {
                let a = t.tanh(x);
                let b = t.exp(a);
                let c = t.square(b);
                let d = t.mul(c, x).unwrap();
                let e = t.scale(d, 0.7);
                let f = t.add_scalar(e, 1.0);
                t.sum(f)
            },
            x0,
        );
    }

    #[test]
    fn softmax_and_log_softmax_gradients() {
        let x0 = m(2, 3, &[0.3, -0.7, 1.1, 0.2, -0.4, 0.9]);
        let w = m(2, 3, &[1.0, 2.0, -1.0, 0.5, -0.3, 0.8]);
        fd_check(
            |t, x| {
                let s = t.softmax_rows(x);
                let l = t.log_softmax_rows(x);
                let wv = t.constant(w.clone());
                let a = t.mul(s, wv).unwrap();
                let b = t.mul(l, wv).unwrap();
                let c = t.add(a, b).unwrap();
                let d = t.sum_cols(c);
                let e = t.square(d);
                t.mean(e)
            },
            x0,
        );
    }

    #[test]
    fn matmul_gradients() {
        let x0 = m(3, 2, &[0.3, -0.7, 1.1, 0.2, -0.4, 0.9]);
        let w = m(4, 2, &[1.0, 2.0, -1.0, 0.5, -0.3, 0.8, 0.1, 0.2]);
        fd_check(
            |t, x| {
                let wv = t.constant(w.clone());
                let y = t.matmul_nt(x, wv).unwrap();
                let z = t.tanh(y);
                let back = t.matmul(z, wv).unwrap();
                let q = t.mul(back, x).unwrap();
                t.sum(q)
            },
            x0.clone(),
        );
        let w2 = m(4, 2, &[0.4, -2.0, 1.0, 0.5, 0.3, 0.8, -0.1, 0.2]);
        fd_check(
            |t, wv| {
                let xv = t.constant(x0.clone());
                let y = t.matmul_nt(xv, wv).unwrap();
                let z = t.tanh(y);
                t.sum(z)
            },
            w2,
        );
    }

    #[test]
    fn block_ops_gradients() {
        // two groups of three nodes
        let x0 = m(6, 1, &[0.3, -0.7, 1.1, 0.2, -0.4, 0.9]);
        let feats = m(
            6,
            2,
            &[
                1.0, 2.0, -1.0, 0.5, -0.3, 0.8, 0.1, 0.2, 0.7, -0.6, 0.4, 0.4,
            ],
        );
        fd_check(
            |t, x| {
                let d = t.scale(x, -0.5);
                let e = t.pair_sum(x, d, 3).unwrap();
                let a = t.softmax_rows(e);
                let f = t.constant(feats.clone());
                let f2 = t.mul_col(f, x).unwrap();
                let out = t.block_matmul(a, f2, 3).unwrap();
                let g = t.group_sum_rows(out, 3).unwrap();
                let h = t.tanh(g);
                t.sum(h)
            },
            x0,
        );
    }

    #[test]
    fn gather_pick_concat_gradients() {
        let x0 = m(3, 2, &[0.3, -0.7, 1.1, 0.2, -0.4, 0.9]);
        fd_check(
            |t, x| {
                let g = t.gather_rows(x, vec![2, 0, 2, 1]).unwrap();
                let sq = t.square(g);
                let c = t.concat_cols(&[g, sq]).unwrap();
                let p = t.pick(c, vec![0, 3, 1, 2]).unwrap();
                let r = t.constant(Matrix::row_vector(vec![0.5, -1.0, 2.0, 0.1]));
                let a = t.add_row(c, r).unwrap();
                let s = t.sum(a);
                let ps = t.sum(p);
                let both = t.add(s, ps).unwrap();
                t.square(both)
            },
            x0,
        );
    }

    #[test]
    fn clamp_minimum_relu_away_from_kinks() {
        let x0 = m(1, 4, &[0.3, -0.7, 1.1, 0.25]);
        fd_check(
            |t, x| {
                let c = t.clamp(x, -0.5, 0.5);
                let sx = t.scale(x, 0.8);
                let mn = t.minimum(c, sx).unwrap();
                let r = t.relu(x);
                let l = t.leaky_relu(x, 0.2);
                let s1 = t.add(mn, r).unwrap();
                let s2 = t.add(s1, l).unwrap();
                let q = t.square(s2);
                t.sum(q)
            },
            x0,
        );
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::new(vec![1], vec![3.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn kink_signature_tracks_relu_side() {
        let sig = |v: f64| {
            let mut t = Tape::new();
            let x = t.constant(Matrix::scalar(v));
            t.relu(x);
            t.kink_signature()
        };
        assert_eq!(sig(0.5), sig(0.7));
        assert_ne!(sig(0.5), sig(-0.5));
        assert_ne!(sig(0.0), sig(1e-5));
    }
}
