//! Dense row-major matrices and Cholesky factor/solve.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use super::NumericsError;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::DimensionMismatch {
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let orow = other.row(k);
                let dst = out.row_mut(i);
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d = *d + a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>, NumericsError> {
        if v.len() != self.cols {
            return Err(NumericsError::DimensionMismatch {
                expected: self.cols,
                got: v.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    /// Symmetric within `tol` relative to the largest entry.
    pub fn is_symmetric(&self, tol: T) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.max_abs().max(T::one());
        for i in 0..self.rows {
            for j in 0..i {
                if (self[(i, j)] - self[(j, i)]).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }

    pub fn add_diagonal(&mut self, v: T) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self[(i, i)] = self[(i, i)] + v;
        }
    }
}

impl<T> Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for DenseMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn symmetry_tolerance<T: Scalar>() -> T {
    T::lit(1e-10).max(T::epsilon() * T::lit(64.0))
}

/// Lower-triangular `L` with `L Lᵀ = A`.
pub fn cholesky_factor<T: Scalar>(a: &DenseMatrix<T>) -> Result<DenseMatrix<T>, NumericsError> {
    if a.rows != a.cols {
        return Err(NumericsError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    if !a.is_symmetric(symmetry_tolerance()) {
        return Err(NumericsError::NotSymmetric);
    }
    let n = a.rows;
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = {
                let (li, lj) = (&l.data[i * n..i * n + j], &l.data[j * n..j * n + j]);
                a[(i, j)] - dot(li, lj)
            };
            if i == j {
                if !(s > T::zero()) {
                    return Err(NumericsError::NotPositiveDefinite { pivot: i });
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Solve `L y = b` for lower-triangular `L`.
pub fn forward_substitute<T: Scalar>(l: &DenseMatrix<T>, b: &[T]) -> Result<Vec<T>, NumericsError> {
    let n = l.rows;
    if b.len() != n {
        return Err(NumericsError::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let s = b[i] - dot(&l.row(i)[..i], &y);
        y.push(s / l[(i, i)]);
    }
    Ok(y)
}

/// Solve `Lᵀ x = y` for lower-triangular `L`.
pub fn backward_substitute_transpose<T: Scalar>(
    l: &DenseMatrix<T>,
    y: &[T],
) -> Result<Vec<T>, NumericsError> {
    let n = l.rows;
    if y.len() != n {
        return Err(NumericsError::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    let mut x = y.to_vec();
    for i in (0..n).rev() {
        x[i] = x[i] / l[(i, i)];
        let xi = x[i];
        let row = l.row(i);
        for k in 0..i {
            x[k] = x[k] - row[k] * xi;
        }
    }
    Ok(x)
}

/// Solve `(L Lᵀ) x = b`.
pub fn cholesky_solve<T: Scalar>(l: &DenseMatrix<T>, b: &[T]) -> Result<Vec<T>, NumericsError> {
    let y = forward_substitute(l, b)?;
    backward_substitute_transpose(l, &y)
}

/// `(L Lᵀ)⁻¹` from its Cholesky factor.
pub fn cholesky_inverse<T: Scalar>(l: &DenseMatrix<T>) -> DenseMatrix<T> {
    let n = l.rows;
    // Rows of L⁻¹ are built by forward substitution on unit vectors; the
    // inverse of a lower-triangular matrix is lower-triangular.
    let mut linv = DenseMatrix::zeros(n, n);
    for j in 0..n {
        linv[(j, j)] = T::one() / l[(j, j)];
        for i in j + 1..n {
            let mut s = T::zero();
            let row = l.row(i);
            for k in j..i {
                s = s + row[k] * linv[(k, j)];
            }
            linv[(i, j)] = -s / l[(i, i)];
        }
    }
    // A⁻¹ = L⁻ᵀ L⁻¹, entry (i, j) = Σ_{k ≥ max(i,j)} linv[k,i] linv[k,j].
    let lt = linv.transpose();
    let mut inv = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = dot(&lt.row(i)[i..], &lt.row(j)[i..]);
            inv[(i, j)] = v;
            inv[(j, i)] = v;
        }
    }
    inv
}

/// `log |L Lᵀ|`.
pub fn cholesky_log_det<T: Scalar>(l: &DenseMatrix<T>) -> T {
    (0..l.rows).fold(T::zero(), |acc, i| acc + l[(i, i)].ln())
}
