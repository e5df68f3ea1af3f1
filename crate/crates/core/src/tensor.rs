use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    /// Row vector times matrix: `out[j] = sum_i x[i] * self[i][j]`.
    pub fn vec_mul(&self, x: &[S], out: &mut [S]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = S::zero());
        for (i, &xi) in x.iter().enumerate() {
            if xi == S::zero() {
                continue;
            }
            crate::scalar::axpy(xi, self.row(i), out);
        }
    }

    /// Matrix times column vector: `out[i] = sum_j self[i][j] * y[j]`.
    /// Used to back-propagate through [`Matrix::vec_mul`].
    pub fn mul_vec(&self, y: &[S], out: &mut [S]) {
        debug_assert_eq!(y.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = crate::scalar::dot(self.row(i), y);
        }
    }

    /// `self += alpha * x^T y` (rank-one update).
    pub fn add_outer(&mut self, alpha: S, x: &[S], y: &[S]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for (i, &xi) in x.iter().enumerate() {
            let a = alpha * xi;
            if a == S::zero() {
                continue;
            }
            crate::scalar::axpy(a, y, self.row_mut(i));
        }
    }

    pub fn frobenius_norm(&self) -> S {
        crate::scalar::l2_norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        crate::scalar::all_finite(&self.data)
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Little-endian `f64` image of the entries, row-major.
    pub fn to_le_f64_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vec_mul_and_mul_vec_are_adjoint() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut out = vec![0.0; 3];
        m.vec_mul(&[1.0, -1.0], &mut out);
        assert_eq!(out, vec![-3.0, -3.0, -3.0]);
        let mut back = vec![0.0; 2];
        m.mul_vec(&[1.0, 0.0, 2.0], &mut back);
        assert_eq!(back, vec![7.0, 16.0]);
    }

    #[test]
    fn outer_update() {
        let mut m = Matrix::<f64>::zeros(2, 2);
        m.add_outer(2.0, &[1.0, 3.0], &[1.0, -1.0]);
        assert_eq!(m.as_slice(), &[2.0, -2.0, 6.0, -6.0]);
    }
}
