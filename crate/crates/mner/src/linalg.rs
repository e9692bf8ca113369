//! Small dense linear-algebra helpers used throughout the crate.
//!
//! All system matrices here are tiny (R x R for the covariance blocks, p x p for
//! the coefficient normal equations), so everything is done densely. Symmetric
//! solves go through [`SpdChol`], a Cholesky factorization that rejects pivots
//! below a relative tolerance instead of silently regularizing.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot tolerance for symmetric factorizations.
pub const PIVOT_RTOL: f64 = 1e-12;

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SpdChol {
    l: DMatrix<f64>,
}

impl SpdChol {
    /// Factor `a` (assumed symmetric; only the lower triangle is read).
    ///
    /// Fails with [`Error::Singular`] when a pivot falls below
    /// `PIVOT_RTOL * max_diag`, reporting `context` and the pivot index.
    pub fn new(a: &DMatrix<f64>, context: &str) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::Validation(format!(
                "{context}: matrix is {}x{}, expected square",
                a.nrows(),
                a.ncols()
            )));
        }
        let max_diag = (0..n).map(|i| a[(i, i)].abs()).fold(0.0_f64, f64::max);
        let floor = PIVOT_RTOL * max_diag.max(f64::MIN_POSITIVE);
        let mut l = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > floor) {
                return Err(Error::Singular(format!(
                    "{context}: pivot {j} is {d:.3e} (tolerance {floor:.3e})"
                )));
            }
            let dj = d.sqrt();
            l[(j, j)] = dj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / dj;
            }
        }
        Ok(Self { l })
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// log det of the factored matrix: 2 * sum log L_ii.
    pub fn log_det(&self) -> f64 {
        (0..self.l.nrows()).map(|i| self.l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    /// Solve A x = b.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(&mut x);
        x
    }

    fn solve_in_place(&self, x: &mut DVector<f64>) {
        let n = self.l.nrows();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[(i, k)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
    }

    /// Solve A X = B columnwise.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        for j in 0..b.ncols() {
            let mut col = DVector::from_column_slice(out.column(j).as_slice());
            self.solve_in_place(&mut col);
            out.set_column(j, &col);
        }
        out
    }

    /// Inverse of the factored matrix.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        self.solve_mat(&DMatrix::identity(n, n))
    }

    /// Solve L z = b (forward substitution only).
    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.l.nrows();
        let mut x = b.clone();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[(i, k)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }
}

/// (A + A^T) / 2.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest absolute difference between A and A^T.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).abs().max()
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(a).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// Project a symmetric matrix onto the PSD cone by clipping negative eigenvalues.
pub fn psd_project(a: &DMatrix<f64>) -> DMatrix<f64> {
    let se = nalgebra::SymmetricEigen::new(symmetrize(a));
    let clipped = DVector::from_iterator(
        se.eigenvalues.len(),
        se.eigenvalues.iter().map(|&v| v.max(0.0)),
    );
    &se.eigenvectors * DMatrix::from_diagonal(&clipped) * se.eigenvectors.transpose()
}

/// Symmetric PSD square root; negative eigenvalues from rounding are clipped,
/// so boundary matrices (zero included) are accepted.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let se = nalgebra::SymmetricEigen::new(symmetrize(a));
    let roots = DVector::from_iterator(
        se.eigenvalues.len(),
        se.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()),
    );
    &se.eigenvectors * DMatrix::from_diagonal(&roots) * se.eigenvectors.transpose()
}

/// Kahan compensated accumulator for order-robust sums.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    pub fn add(&mut self, v: f64) {
        let y = v - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Compensated elementwise accumulation of matrices with one shared shape.
#[derive(Debug, Clone)]
pub struct KahanMat {
    sum: DMatrix<f64>,
    c: DMatrix<f64>,
}

impl KahanMat {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            sum: DMatrix::zeros(nrows, ncols),
            c: DMatrix::zeros(nrows, ncols),
        }
    }

    pub fn add(&mut self, m: &DMatrix<f64>) {
        for (i, v) in m.iter().enumerate() {
            let y = v - self.c[i];
            let t = self.sum[i] + y;
            self.c[i] = (t - self.sum[i]) - y;
            self.sum[i] = t;
        }
    }

    pub fn value(self) -> DMatrix<f64> {
        self.sum
    }
}
