use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(arg_err!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// A `1 x n` matrix.
    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    /// An `n x 1` matrix.
    pub fn column_vector(data: Vec<f64>) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::row_vector(vec![value])
    }

    /// Stacks equally sized rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(arg_err!(
                    "row {} has width {}, expected {}",
                    i,
                    r.len(),
                    cols
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Copy of rows `lo..hi`.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Result<Matrix> {
        if lo > hi || hi > self.rows {
            return Err(arg_err!("rows {}..{} of {}", lo, hi, self.rows));
        }
        Matrix::from_vec(hi - lo, self.cols, self.data[lo * self.cols..hi * self.cols].to_vec())
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`.
    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    let mut acc = [0.0f64; 4];
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a · bᵀ` for `a: n x k`, `b: m x k`.
pub(crate) fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.cols);
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(ar, b.row(j));
        }
    }
    out
}

/// `out += a · b` for `a: n x k`, `b: k x m`.
pub(crate) fn matmul_nn_acc(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(a.cols, b.rows);
    for (arow, orow) in a
        .data
        .chunks_exact(a.cols.max(1))
        .zip(out.data.chunks_exact_mut(b.cols.max(1)))
    {
        for (aik, brow) in arow.iter().zip(b.data.chunks_exact(b.cols.max(1))) {
            if *aik != 0.0 {
                axpy(*aik, brow, orow);
            }
        }
    }
}

/// `out += aᵀ · b` for `a: k x n`, `b: k x m`.
pub(crate) fn matmul_tn_acc(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(a.rows, b.rows);
    let m = b.cols.max(1);
    for (arow, brow) in a.data.chunks_exact(a.cols.max(1)).zip(b.data.chunks_exact(m)) {
        for (aki, orow) in arow.iter().zip(out.data.chunks_exact_mut(m)) {
            if *aki != 0.0 {
                axpy(*aki, brow, orow);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_kernels_agree_with_naive() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let mut nn = Matrix::zeros(2, 2);
        matmul_nn_acc(&a, &b, &mut nn);
        assert_eq!(nn.data(), &[58.0, 64.0, 139.0, 154.0]);
        let nt = matmul_nt(&a, &b.transpose());
        assert_eq!(nt, nn);
        let mut tn = Matrix::zeros(2, 2);
        matmul_tn_acc(&a.transpose(), &b, &mut tn);
        assert_eq!(tn, nn);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..7).map(f64::from).collect();
        assert_eq!(dot(&a, &a), 91.0);
    }
}
