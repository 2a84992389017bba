use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. Vectors are `1×n` (row) or `n×1`
/// (column) matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("Matrix::from_vec", "dimensions must be positive"));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_row_slices<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut data = Vec::new();
        let mut n = 0;
        let mut cols = None;
        for r in rows {
            match cols {
                None => cols = Some(r.len()),
                Some(c) if c != r.len() => {
                    return Err(Error::shape("Matrix::from_row_slices", "ragged rows"))
                }
                _ => {}
            }
            data.extend_from_slice(r);
            n += 1;
        }
        Matrix::from_vec(n, cols.unwrap_or(0), data)
    }

    pub fn row_vector(data: Vec<f64>) -> Result<Self> {
        Matrix::from_vec(1, data.len(), data)
    }

    pub fn column_vector(data: Vec<f64>) -> Result<Self> {
        Matrix::from_vec(data.len(), 1, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &Matrix) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// `x · wᵀ` where `x` is `n×k` and `w` is `m×k`.
    pub fn matmul_t(&self, w: &Matrix) -> Result<Matrix> {
        if self.cols != w.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} · ({:?})ᵀ", self.shape(), w.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.rows, w.rows);
        gemm_nt(self, w, &mut out, 0.0);
        Ok(out)
    }
}

// Thin wrappers over `matrixmultiply::dgemm`; all operands row-major.

/// `out = beta·out + x·wᵀ`; x: n×k, w: m×k, out: n×m.
pub(crate) fn gemm_nt(x: &Matrix, w: &Matrix, out: &mut Matrix, beta: f64) {
    let (n, k, m) = (x.rows, x.cols, w.rows);
    // SAFETY: slice lengths and strides follow from the checked shapes.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            x.data.as_ptr(),
            k as isize,
            1,
            w.data.as_ptr(),
            1,
            k as isize,
            beta,
            out.data.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `out = beta·out + g·w`; g: n×m, w: m×k, out: n×k.
pub(crate) fn gemm_nn(g: &Matrix, w: &Matrix, out: &mut Matrix, beta: f64) {
    let (n, m, k) = (g.rows, g.cols, w.cols);
    // SAFETY: see gemm_nt.
    unsafe {
        matrixmultiply::dgemm(
            n,
            m,
            k,
            1.0,
            g.data.as_ptr(),
            m as isize,
            1,
            w.data.as_ptr(),
            k as isize,
            1,
            beta,
            out.data.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `out = beta·out + gᵀ·x`; g: n×m, x: n×k, out: m×k.
pub(crate) fn gemm_tn(g: &Matrix, x: &Matrix, out: &mut Matrix, beta: f64) {
    let (n, m, k) = (g.rows, g.cols, x.cols);
    // SAFETY: see gemm_nt.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            g.data.as_ptr(),
            1,
            m as isize,
            x.data.as_ptr(),
            k as isize,
            1,
            beta,
            out.data.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}
