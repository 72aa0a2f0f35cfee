use serde::{Deserialize, Serialize};

use super::{ProbVector, SIMPLEX_TOL};
use crate::error::{Error, Result};

/// Default condition-number ceiling above which inversion is refused.
pub const MAX_CONDITION: f64 = 1e12;

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    dim: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: data.len(),
            });
        }
        Ok(Matrix { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { dim, data })
    }

    pub fn zeros(dim: usize) -> Self {
        Matrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Matrix::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let n = self.dim;
        let mut t = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.dim, other.dim, "matmul: dimension mismatch");
        let n = self.dim;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.dim, x.len(), "mul_vec: dimension mismatch");
        (0..self.dim)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.dim];
        for i in 0..self.dim {
            for (s, v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    /// `||M||_1 * ||M^{-1}||_1`, or `+inf` when `M` is singular.
    pub fn condition_one(&self) -> f64 {
        match invert_with_threshold(self, f64::INFINITY) {
            Ok(inv) => matrix_one_norm(self) * matrix_one_norm(&inv),
            Err(_) => f64::INFINITY,
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.dim + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.dim + j]
    }
}

/// Maximum absolute column sum.
pub fn matrix_one_norm(m: &Matrix) -> f64 {
    let n = m.dim();
    (0..n)
        .map(|j| (0..n).map(|i| m[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse by Gauss-Jordan elimination with partial pivoting, refusing
/// matrices whose 1-norm condition number exceeds [`MAX_CONDITION`].
pub fn invert(m: &Matrix) -> Result<Matrix> {
    invert_with_threshold(m, MAX_CONDITION)
}

pub fn invert_with_threshold(m: &Matrix, max_condition: f64) -> Result<Matrix> {
    let n = m.dim();
    if let Some(index) = m.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let scale = matrix_one_norm(m);
    if n == 0 || scale == 0.0 {
        return Err(Error::SingularMatrix {
            condition: f64::INFINITY,
        });
    }
    let pivot_floor = f64::EPSILON * scale * n as f64;

    let mut a = m.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| a[(r, col)].abs().total_cmp(&a[(s, col)].abs()))
            .expect("non-empty range");
        if a[(pivot_row, col)].abs() <= pivot_floor {
            return Err(Error::SingularMatrix {
                condition: f64::INFINITY,
            });
        }
        if pivot_row != col {
            for j in 0..n {
                a.data.swap(pivot_row * n + j, col * n + j);
                inv.data.swap(pivot_row * n + j, col * n + j);
            }
        }
        let pivot = a[(col, col)];
        for j in 0..n {
            a[(col, j)] /= pivot;
            inv[(col, j)] /= pivot;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = a[(r, col)];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                a[(r, j)] -= factor * a[(col, j)];
                inv[(r, j)] -= factor * inv[(col, j)];
            }
        }
    }

    let condition = scale * matrix_one_norm(&inv);
    if !(condition <= max_condition) {
        return Err(Error::SingularMatrix { condition });
    }
    Ok(inv)
}

/// Square matrix with nonnegative entries whose columns each sum to one.
///
/// Entry `(i, j)` is the probability of observing noisy label `i` given clean label `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ColumnStochasticMatrix(Matrix);

impl ColumnStochasticMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if let Some(index) = m.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if let Some(pos) = m.data.iter().position(|&v| v < 0.0) {
            return Err(Error::NotColumnStochastic(format!(
                "negative entry at ({}, {})",
                pos / m.dim,
                pos % m.dim
            )));
        }
        for (j, s) in m.column_sums().into_iter().enumerate() {
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::NotColumnStochastic(format!(
                    "column {j} sums to {s}"
                )));
            }
        }
        Ok(ColumnStochasticMatrix(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Matrix whose columns are the given probability vectors.
    pub fn from_columns(columns: &[ProbVector]) -> Result<Self> {
        let n = columns.len();
        let mut m = Matrix::zeros(n);
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: col.len(),
                });
            }
            for i in 0..n {
                m[(i, j)] = col[i];
            }
        }
        Self::new(m)
    }

    pub fn identity(dim: usize) -> Self {
        ColumnStochasticMatrix(Matrix::identity(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn invert(&self) -> Result<Matrix> {
        invert(&self.0)
    }

    /// `T q`, which stays on the simplex.
    pub fn apply(&self, q: &ProbVector) -> ProbVector {
        ProbVector::new_unchecked(self.0.mul_vec(q.as_slice()))
    }
}

impl std::ops::Index<(usize, usize)> for ColumnStochasticMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

impl TryFrom<Vec<Vec<f64>>> for ColumnStochasticMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<ColumnStochasticMatrix> for Vec<Vec<f64>> {
    fn from(m: ColumnStochasticMatrix) -> Self {
        m.0.to_rows()
    }
}
