//! Small dense helpers shared by the variance and fitting code.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Reciprocal condition guard for symmetric positive definite solves.
pub const RCOND_MIN: f64 = 1e-12;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// `lambda_min / lambda_max` of a symmetric matrix; zero or negative when it
/// is not positive definite.
pub fn reciprocal_condition(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if max == 0.0 {
        return 0.0;
    }
    eig.min() / max
}

/// Number of eigenvalues above `1e-10` times the largest.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let eig = m.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if max == 0.0 {
        return 0;
    }
    eig.iter().filter(|&&l| l > max * 1e-10).count()
}

/// Cholesky factor after checking the reciprocal condition number.
pub fn guarded_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let rcond = reciprocal_condition(m);
    if rcond < RCOND_MIN {
        return Err(Error::NonEstimable {
            rank: numerical_rank(m),
            dim: m.nrows(),
        });
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::NonEstimable {
        rank: numerical_rank(m),
        dim: m.nrows(),
    })
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(symmetrized(guarded_cholesky(m)?.inverse()))
}

pub fn log_det_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}
