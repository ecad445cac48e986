//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub fn std_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// A factor `F` with `F Fᵀ = cov` for a positive semidefinite `cov`.
///
/// Uses Cholesky when possible and otherwise a clamped symmetric
/// eigendecomposition, so a zero covariance yields a zero factor.
pub fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = cov.clone().cholesky() {
        return ch.l();
    }
    let eig = cov.clone().symmetric_eigen();
    let n = cov.nrows();
    let mut f = eig.eigenvectors;
    for j in 0..n {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..n {
            f[(i, j)] *= s;
        }
    }
    f
}

/// Draws `mean + F z` with `z` standard normal.
pub fn sample_with_factor<R: Rng + ?Sized>(mean: &DVector<f64>, factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = std_normal_vec(mean.len(), rng);
    mean + factor * z
}

/// Draws from `N(mean, cov)` for a positive semidefinite `cov`.
pub fn sample_mvn<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    sample_with_factor(mean, &psd_factor(cov), rng)
}

/// Inverse and log-determinant of a symmetric positive-definite matrix.
pub fn spd_inverse_log_det(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let ch = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("{what} is not positive definite")))?;
    let log_det = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((ch.inverse(), log_det))
}

pub fn spd_log_det(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let ch = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("{what} is not positive definite")))?;
    Ok(2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}
