//! Conjugate linear-Gaussian regression of the augmented utility on the
//! covariates: per-state sufficient statistics, the Γ posterior and the
//! integrated likelihood.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsf;
use crate::linalg::std_normal_vec;
use crate::special::normal_log_pdf;

/// Accumulators for one state.
///
/// `sxx`/`sxu` are the precision-weighted cross products consumed by the
/// posterior. The running means and central moments (`x_mean`, `u_mean`,
/// `cxx`, `cxu`, `cuu`) follow the unweighted mean/covariance recursions and
/// are kept as a cross-check; they are computed on the raw utility `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub n: u64,
    pub sxx: DMatrix<f64>,
    pub sxu: DVector<f64>,
    pub x_mean: DVector<f64>,
    pub u_mean: f64,
    pub cxx: DMatrix<f64>,
    pub cxu: DVector<f64>,
    pub cuu: f64,
}

impl SufficientStats {
    pub fn new(d: usize) -> Self {
        Self {
            n: 0,
            sxx: DMatrix::zeros(d, d),
            sxu: DVector::zeros(d),
            x_mean: DVector::zeros(d),
            u_mean: 0.0,
            cxx: DMatrix::zeros(d, d),
            cxu: DVector::zeros(d),
            cuu: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.sxu.len()
    }

    /// Absorbs one point `(x, U)` drawn under mixture component `z`.
    pub fn update(&mut self, x: &[f64], u: f64, z: usize) {
        let t = fsf::table();
        let prec = 1.0 / t.variance(z);
        let r = u - t.mu[z];
        let d = self.dim();
        for i in 0..d {
            let xi = x[i] * prec;
            self.sxu[i] += xi * r;
            for j in 0..d {
                self.sxx[(i, j)] += xi * x[j];
            }
        }

        // Running mean and population central moments:
        // C⁽ⁿ⁺¹⁾ = n/(n+1)·C⁽ⁿ⁾ + n/(n+1)²·(x − x̄)(x − x̄)ᵀ
        let n = self.n as f64;
        let a = n / (n + 1.0);
        let b = n / ((n + 1.0) * (n + 1.0));
        let du = u - self.u_mean;
        for i in 0..d {
            let dxi = x[i] - self.x_mean[i];
            self.cxu[i] = a * self.cxu[i] + b * dxi * du;
            for j in 0..d {
                let dxj = x[j] - self.x_mean[j];
                self.cxx[(i, j)] = a * self.cxx[(i, j)] + b * dxi * dxj;
            }
        }
        self.cuu = a * self.cuu + b * du * du;
        for i in 0..d {
            self.x_mean[i] += (x[i] - self.x_mean[i]) / (n + 1.0);
        }
        self.u_mean += du / (n + 1.0);
        self.n += 1;
    }
}

/// Gaussian posterior of Γ.
#[derive(Debug, Clone)]
pub struct GammaPosterior {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    chol_l: DMatrix<f64>,
}

impl GammaPosterior {
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        let linv = self
            .chol_l
            .clone()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .expect("triangular factor has a positive diagonal");
        linv.transpose() * linv
    }

    /// `xᵀ Σ x` without forming Σ.
    pub fn quad_var(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let w = self
            .chol_l
            .solve_lower_triangular(&xv)
            .expect("triangular factor has a positive diagonal");
        w.norm_squared()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = std_normal_vec(self.mean.len(), rng);
        let w = self
            .chol_l
            .transpose()
            .solve_upper_triangular(&z)
            .expect("triangular factor has a positive diagonal");
        &self.mean + w
    }
}

/// Splits Λ into the prior mean and diagonal prior precision.
pub fn prior_from_lambda(lambda: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let d = lambda.len() / 2;
    let mean = lambda.rows(0, d).into_owned();
    let prec = DVector::from_iterator(d, (0..d).map(|i| (-lambda[d + i]).exp()));
    (mean, prec)
}

/// Posterior of Γ given the accumulators and the prior Λ (means then log-variances).
pub fn posterior_gamma(stats: &SufficientStats, lambda: &DVector<f64>) -> Result<GammaPosterior> {
    let d = stats.dim();
    if lambda.len() != 2 * d {
        return Err(Error::Dimension {
            what: "Lambda",
            expected: 2 * d,
            got: lambda.len(),
        });
    }
    let (m0, p0) = prior_from_lambda(lambda);
    let mut precision = stats.sxx.clone();
    let mut rhs = stats.sxu.clone();
    for i in 0..d {
        precision[(i, i)] += p0[i];
        rhs[i] += p0[i] * m0[i];
    }
    let ch = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("posterior precision is not positive definite".into()))?;
    let mean = ch.solve(&rhs);
    Ok(GammaPosterior {
        mean,
        precision,
        chol_l: ch.l(),
    })
}

/// Log prior-predictive density of a new point's utility residual `U − μ_z`.
pub fn integrated_loglik(
    stats: &SufficientStats,
    lambda: &DVector<f64>,
    x: &[f64],
    u: f64,
    z: usize,
) -> Result<f64> {
    let post = posterior_gamma(stats, lambda)?;
    let t = fsf::table();
    let mean: f64 = post.mean.iter().zip(x).map(|(m, xi)| m * xi).sum();
    let var = post.quad_var(x) + t.variance(z);
    Ok(normal_log_pdf(u - t.mu[z], mean, var))
}
