use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MathError;

/// Dense row-major `f32` matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Default for Matrix {
    fn default() -> Self {
        Matrix::zeros(0, 0)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, MathError> {
        if data.len() != rows * cols {
            return Err(MathError::Shape { operand: "data", expected: (rows, cols), actual: (data.len(), 1) });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(MathError::NonFinite { context: format!("matrix entry {pos}") });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self { rows: rows.len(), cols, data }
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f32, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..=scale)).collect();
        Self { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of rows `start..start + len`.
    pub fn row_slice(&self, start: usize, len: usize) -> Matrix {
        let data = self.data[start * self.cols..(start + len) * self.cols].to_vec();
        Matrix { rows: len, cols: self.cols, data }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · rhs`, `operand` names the right-hand side in shape errors.
    pub fn matmul_named(&self, rhs: &Matrix, operand: &'static str) -> Result<Matrix, MathError> {
        if self.cols != rhs.rows {
            return Err(MathError::Shape { operand, expected: (self.cols, rhs.cols), actual: rhs.shape() });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, MathError> {
        self.matmul_named(rhs, "rhs")
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix, MathError> {
        let mut out = self.clone();
        out.add_assign(rhs)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<(), MathError> {
        if self.shape() != rhs.shape() {
            return Err(MathError::Shape { operand: "addend", expected: self.shape(), actual: rhs.shape() });
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Appends the rows of `other` (the `f_concat` of a KV cache update).
    pub fn append_rows(&mut self, other: &Matrix) -> Result<(), MathError> {
        if self.cols != other.cols {
            return Err(MathError::Shape {
                operand: "appended rows",
                expected: (other.rows, self.cols),
                actual: other.shape(),
            });
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    /// `max |a-b| / max(1, max |b|)`: relative error with an absolute floor near zero.
    pub fn rel_diff(&self, reference: &Matrix) -> f32 {
        let scale = reference.data.iter().fold(1.0f32, |m, v| m.max(v.abs()));
        self.max_abs_diff(reference) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_operand() {
        let a = Matrix::zeros(1, 3);
        let b = Matrix::zeros(2, 2);
        let err = a.matmul_named(&b, "W_Q").unwrap_err();
        assert!(err.to_string().contains("W_Q"), "{err}");
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f32::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn append_and_slice() {
        let mut a = Matrix::from_rows(&[&[1.0, 2.0]]);
        a.append_rows(&Matrix::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        assert_eq!(a.rows(), 3);
        assert_eq!(a.row_slice(1, 2).as_slice(), &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.transpose().row(0), &[1.0, 3.0, 5.0]);
    }
}
