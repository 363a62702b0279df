//! Token tensors and small dense matrices.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Batched token tensor, row-major `[batch][length][dim]`.
///
/// The first `l_spec` tokens of every sample are special (class tokens and the
/// like) and never take part in merging.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    batch: usize,
    length: usize,
    dim: usize,
    l_spec: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(
        batch: usize,
        length: usize,
        dim: usize,
        l_spec: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if batch == 0 || length == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "batch, length and dim must be >= 1 (got {batch}x{length}x{dim})"
            )));
        }
        if l_spec >= length {
            return Err(Error::Shape(format!(
                "l_spec {l_spec} must be smaller than length {length}"
            )));
        }
        let expected = batch
            .checked_mul(length)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| Error::Shape(format!("{batch}x{length}x{dim} overflows")))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} values for {batch}x{length}x{dim}, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            batch,
            length,
            dim,
            l_spec,
            data,
        })
    }

    /// Stacks per-sample `length x dim` matrices.
    pub fn from_samples(samples: &[Matrix], l_spec: usize) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Shape("no samples".into()))?;
        let (length, dim) = (first.rows(), first.cols());
        let mut data = Vec::with_capacity(samples.len() * length * dim);
        for s in samples {
            if s.rows() != length || s.cols() != dim {
                return Err(Error::Shape(format!(
                    "sample is {}x{} but the first one is {length}x{dim}",
                    s.rows(),
                    s.cols()
                )));
            }
            data.extend_from_slice(s.as_slice());
        }
        Self::new(samples.len(), length, dim, l_spec, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn l_spec(&self) -> usize {
        self.l_spec
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn token(&self, b: usize, l: usize) -> &[f64] {
        let start = (b * self.length + l) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn sample_slice(&self, b: usize) -> &[f64] {
        let n = self.length * self.dim;
        &self.data[b * n..(b + 1) * n]
    }

    /// Copies sample `b` into a `length x dim` matrix.
    pub fn sample(&self, b: usize) -> Matrix {
        Matrix {
            rows: self.length,
            cols: self.dim,
            data: self.sample_slice(b).to_vec(),
        }
    }

    pub fn samples(&self) -> Vec<Matrix> {
        (0..self.batch).map(|b| self.sample(b)).collect()
    }

    /// Same tensor with a different special-token count.
    pub fn with_l_spec(mut self, l_spec: usize) -> Result<Self> {
        if l_spec >= self.length {
            return Err(Error::Shape(format!(
                "l_spec {l_spec} must be smaller than length {}",
                self.length
            )));
        }
        self.l_spec = l_spec;
        Ok(self)
    }

    /// Largest absolute elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &TokenMatrix) -> Option<f64> {
        if self.batch != other.batch || self.length != other.length || self.dim != other.dim {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| libm::fabs(a - b))
                .fold(0.0, f64::max),
        )
    }
}

/// Dense row-major matrix. Zero rows are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {} values for {rows}x{cols}, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; panics on ragged input. Meant for tests
    /// and small literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
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

    pub fn column_sum(&self, c: usize) -> f64 {
        (0..self.rows).map(|r| self.get(r, c)).sum()
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).iter().sum()
    }

    /// Gathers the given rows in order.
    pub fn select_rows(&self, index: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(index.len() * self.cols);
        for &r in index {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: index.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimensions");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let lhs_row = self.row(r);
            let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.get(r, c);
            }
        }
        out
    }

    /// Appends the rows of `other`; column counts must agree.
    pub fn append_rows(&mut self, other: &Matrix) {
        assert!(self.rows == 0 || self.cols == other.cols, "column mismatch");
        if self.rows == 0 {
            self.cols = other.cols;
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(TokenMatrix::new(1, 2, 1, 2, vec![0.0; 2]).is_err());
        assert!(TokenMatrix::new(1, 2, 1, 0, vec![0.0; 3]).is_err());
        assert!(TokenMatrix::new(0, 2, 1, 0, vec![]).is_err());
        assert_eq!(
            TokenMatrix::new(1, 2, 1, 0, vec![0.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        );
    }

    #[test]
    fn token_indexing() {
        let t = TokenMatrix::new(2, 3, 2, 1, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(t.token(1, 2), &[10.0, 11.0]);
        assert_eq!(t.sample(1).row(0), &[6.0, 7.0]);
    }

    #[test]
    fn matmul_small() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[5.0], [6.0]]);
        assert_eq!(a.matmul(&b), Matrix::from_rows(&[[17.0], [39.0]]));
        assert_eq!(a.transpose().get(0, 1), 3.0);
    }
}
