use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Every vector quantity in the pipeline (batches of points, velocities,
/// weights, biases, scalar losses) is a `Tensor2`; a scalar is `1×1`.
#[derive(Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor2[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor2 {
    /// Builds a tensor from external data, rejecting NaN and infinities.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Tensor2::from_vec",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Tensor2 { rows, cols, data })
    }

    /// Internal constructor: shape is checked, finiteness is not.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor2 { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::shape(
                "Tensor2::from_rows",
                format!("row {bad} has {} columns, expected {cols}", rows[bad].len()),
            ));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// A `1×n` row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Tensor2::from_raw(1, values.len(), values.to_vec())
    }

    /// An `n×1` column vector.
    pub fn column(values: &[f64]) -> Self {
        Tensor2::from_raw(values.len(), 1, values.to_vec())
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column tensor has no row data anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// The single value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Tensor2, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two same-shape tensors. Panics on mismatch.
    pub fn zip_map(&self, other: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Tensor2::from_raw(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Tensor2) -> Tensor2 {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2) -> Tensor2 {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor2 {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor2) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self + coef[i] * other` row by row.
    pub fn add_scaled_rows(&self, other: &Tensor2, coef: &[f64]) -> Tensor2 {
        assert_eq!(self.shape(), other.shape(), "add_scaled_rows shape mismatch");
        assert_eq!(coef.len(), self.rows, "add_scaled_rows coefficient count");
        let mut out = self.clone();
        for (r, &c) in coef.iter().enumerate() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(other.row(r)) {
                *o += c * b;
            }
        }
        out
    }

    /// Multiplies row `i` by `coef[i]`.
    pub fn scale_rows(&self, coef: &[f64]) -> Tensor2 {
        assert_eq!(coef.len(), self.rows, "scale_rows coefficient count");
        let mut out = self.clone();
        for (r, &c) in coef.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= c);
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor2) -> f64 {
        assert_eq!(self.shape(), other.shape(), "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Column sums as a `1×cols` row.
    pub fn col_sum(&self) -> Tensor2 {
        let mut out = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor2::from_raw(1, self.cols, out)
    }

    /// Column means as a `1×cols` row.
    pub fn col_mean(&self) -> Tensor2 {
        self.col_sum().scale(1.0 / self.rows as f64)
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_row_broadcast(&self, row: &Tensor2) -> Tensor2 {
        assert_eq!((1, self.cols), row.shape(), "row broadcast shape mismatch");
        let mut out = self.clone();
        for r in 0..self.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        out
    }

    /// Side-by-side concatenation; row counts must agree.
    pub fn concat_cols(parts: &[&Tensor2]) -> Result<Tensor2> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(p) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts {} vs {}", rows, p.rows),
            ));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Tensor2::from_raw(rows, cols, data))
    }

    /// Copies columns `start..start + width`.
    pub fn slice_cols(&self, start: usize, width: usize) -> Tensor2 {
        assert!(start + width <= self.cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(self.rows * width);
        for row in self.iter_rows() {
            data.extend_from_slice(&row[start..start + width]);
        }
        Tensor2::from_raw(self.rows, width, data)
    }

    /// Stacks rows of `parts` vertically.
    pub fn concat_rows(parts: &[&Tensor2]) -> Result<Tensor2> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if let Some(p) = parts.iter().find(|p| p.cols != cols) {
            return Err(Error::shape(
                "concat_rows",
                format!("column counts {} vs {}", cols, p.cols),
            ));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Tensor2::from_raw(rows, cols, data))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Tensor2 {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor2::from_raw(idx.len(), self.cols, data)
    }

    /// `op(self) · op(rhs)` where `op` optionally transposes.
    pub fn matmul_t(&self, transpose_self: bool, rhs: &Tensor2, transpose_rhs: bool) -> Tensor2 {
        let (m, k) = if transpose_self {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        };
        let (k2, n) = if transpose_rhs {
            (rhs.cols, rhs.rows)
        } else {
            (rhs.rows, rhs.cols)
        };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = Tensor2::zeros(m, n);
        if m == 0 || n == 0 || k == 0 {
            return out;
        }
        let (rsa, csa) = if transpose_self {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        };
        let (rsb, csb) = if transpose_rhs {
            (1, rhs.cols as isize)
        } else {
            (rhs.cols as isize, 1)
        };
        // SAFETY: the pointers cover m×k, k×n and m×n elements with the strides
        // given above, which follow from the row-major layout checked by the
        // shape assertions.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                rsa,
                csa,
                rhs.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    pub fn matmul(&self, rhs: &Tensor2) -> Tensor2 {
        self.matmul_t(false, rhs, false)
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Normwise relative error `max|a-b| / max(max|a|, max|b|, floor)`.
pub fn rel_err(a: &Tensor2, b: &Tensor2, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_err shape mismatch");
    let diff = a.sub(b).max_abs();
    diff / a.max_abs().max(b.max_abs()).max(floor)
}
