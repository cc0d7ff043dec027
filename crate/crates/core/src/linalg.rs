//! Small dense linear algebra: row-major matrices, LU with partial pivoting,
//! and the spectral norm through a cyclic Jacobi eigen-solver. Sizes here are
//! the problem dimensions (a handful), so nothing is blocked or vectorized.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Largest singular value, from the eigenvalues of the smaller Gram matrix.
    pub fn spectral_norm(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        let gram = if self.rows <= self.cols {
            self.matmul(&self.transpose())
        } else {
            self.transpose().matmul(self)
        };
        let eig = symmetric_eigenvalues(&gram);
        eig.into_iter().fold(0.0f64, f64::max).max(0.0).sqrt()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{}", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        Ok(())
    }
}

/// LU factorization `PA = LU` of a square matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
    singular: bool,
}

impl Lu {
    pub fn new(a: &Matrix) -> Lu {
        assert_eq!(a.rows, a.cols, "LU of a non-square matrix");
        let n = a.rows;
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let mut singular = false;
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot == 0.0 {
                singular = true;
                continue;
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let d = lu[k * n + k];
            for i in k + 1..n {
                let factor = lu[i * n + k] / d;
                lu[i * n + k] = factor;
                if factor != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= factor * lu[k * n + j];
                    }
                }
            }
        }
        Lu { n, lu, perm, sign, singular }
    }

    pub fn det(&self) -> f64 {
        if self.singular {
            return 0.0;
        }
        (0..self.n).fold(self.sign, |acc, i| acc * self.lu[i * self.n + i])
    }

    pub fn is_singular(&self) -> bool {
        self.singular
    }

    /// Solves `A x = b` in place. Callers check [`Lu::det`] first.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        let permuted: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        b.copy_from_slice(&permuted);
        for i in 0..n {
            let mut s = b[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * b[j];
            }
            b[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * b[j];
            }
            b[i] = s / self.lu[i * n + i];
        }
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.rows, self.n);
        let mut out = Matrix::zeros(b.rows, b.cols);
        let mut col = vec![0.0; self.n];
        for j in 0..b.cols {
            for i in 0..self.n {
                col[i] = b[(i, j)];
            }
            self.solve_in_place(&mut col);
            for i in 0..self.n {
                out[(i, j)] = col[i];
            }
        }
        out
    }
}

pub fn det(a: &Matrix) -> f64 {
    if a.rows == 0 {
        return 1.0;
    }
    Lu::new(a).det()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut m = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off <= 1e-30 * m.frobenius_sq().max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| m[(i, i)]).collect()
}

/// Newton's method for `r(u) = 0`. `eval` returns the residual and its
/// Jacobian; iteration stops once `max |r| <= tol`. Returns the root and the
/// number of iterations used.
pub fn newton(
    mut u: Vec<f64>,
    tol: f64,
    max_iter: usize,
    guard: f64,
    mut eval: impl FnMut(&[f64]) -> Result<(Vec<f64>, Matrix)>,
) -> Result<(Vec<f64>, usize)> {
    let mut residual = f64::INFINITY;
    for it in 0..=max_iter {
        let (mut r, jac) = eval(&u)?;
        residual = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if residual <= tol {
            return Ok((u, it));
        }
        if !residual.is_finite() || it == max_iter {
            break;
        }
        let lu = Lu::new(&jac);
        let det = lu.det();
        if !(det.abs() >= guard) {
            return Err(Error::SingularJacobian(det));
        }
        lu.solve_in_place(&mut r);
        for (x, dx) in u.iter_mut().zip(&r) {
            *x -= dx;
        }
    }
    Err(Error::NewtonDivergence { iterations: max_iter, residual })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solve_and_det() {
        let a = Matrix::from_rows(3, 3, vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0]);
        let lu = Lu::new(&a);
        // det by cofactor expansion along the first row
        let expected = 0.0 * (1.0 * 1.0 - 0.0 * 0.0) - 2.0 * (1.0 * 1.0 - 0.0 * 3.0) + 1.0 * (0.0 - 3.0);
        assert!((lu.det() - expected).abs() < 1e-14);
        let mut b = vec![3.0, 2.0, 4.0];
        lu.solve_in_place(&mut b);
        let back = a.matvec(&b);
        for (got, want) in back.iter().zip([3.0, 2.0, 4.0]) {
            assert!((got - want).abs() < 1e-13);
        }
    }

    #[test]
    fn singular_matrix_has_zero_det() {
        let a = Matrix::from_rows(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        assert!(det(&a).abs() < 1e-15);
    }

    #[test]
    fn spectral_norm_of_rank_one_row() {
        let a = Matrix::from_rows(2, 2, vec![0.0, 0.0, -0.25, 0.5]);
        assert!((a.spectral_norm() - (0.25f64.powi(2) + 0.25).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn newton_on_cubic() {
        let (u, it) = newton(vec![1.0], 1e-14, 50, 1e-12, |u| {
            Ok((vec![u[0] * u[0] * u[0] - 2.0], Matrix::from_rows(1, 1, vec![3.0 * u[0] * u[0]])))
        })
        .unwrap();
        assert!((u[0] - 2f64.cbrt()).abs() < 1e-14);
        assert!(it < 10);
    }

    #[test]
    fn newton_failures() {
        let flat = newton(vec![0.0], 1e-12, 50, 1e-8, |u| {
            Ok((vec![u[0] * u[0] + 1.0], Matrix::from_rows(1, 1, vec![2.0 * u[0]])))
        });
        assert!(matches!(flat, Err(Error::SingularJacobian(_))));
        // no real root: iterates wander without converging
        let wander = newton(vec![0.3], 1e-12, 50, 1e-300, |u| {
            Ok((vec![u[0] * u[0] + 1.0], Matrix::from_rows(1, 1, vec![2.0 * u[0]])))
        });
        assert!(matches!(wander, Err(Error::NewtonDivergence { .. }) | Err(Error::SingularJacobian(_))));
    }

    #[test]
    fn jacobi_on_known_spectrum() {
        let a = Matrix::from_rows(3, 3, vec![2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]);
        let mut eig = symmetric_eigenvalues(&a);
        eig.sort_by(f64::total_cmp);
        let r2 = 2f64.sqrt();
        for (got, want) in eig.iter().zip([2.0 - r2, 2.0, 2.0 + r2]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}
