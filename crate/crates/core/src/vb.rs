//! Truncated stick-breaking Dirichlet-process Gaussian mixture fitted by
//! coordinate-ascent variational inference.
//!
//! Wishart convention: `Γ ~ W(a, B⁻¹)`, so `E[Γ] = a B⁻¹`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::spd_inverse_log_det;
use crate::model::HyperParams;
use crate::special::{digamma, ln_beta, ln_gamma, ln_multigamma, log_sum_exp, wishart_digamma_sum};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Normal–Wishart base measure and concentration prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VbPrior {
    pub m0: DVector<f64>,
    pub beta0: f64,
    pub a0: f64,
    pub b0: DMatrix<f64>,
    pub a_v0: f64,
    pub b_v0: f64,
}

impl VbPrior {
    pub fn from_hyper(hp: &HyperParams) -> Self {
        Self {
            m0: hp.lambda_mean.clone(),
            beta0: hp.mean_precision,
            a0: hp.wishart_dof,
            b0: hp.wishart_scale.clone(),
            a_v0: hp.concentration_prior.shape,
            b_v0: hp.concentration_prior.rate,
        }
    }

    pub fn dim(&self) -> usize {
        self.m0.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub k: usize,
    /// N × K responsibilities.
    pub phi: DMatrix<f64>,
    /// Beta parameters of the first K − 1 sticks (the last stick is 1).
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub m: Vec<DVector<f64>>,
    pub beta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<DMatrix<f64>>,
    pub a_v: f64,
    pub b_v: f64,
    pub elbo_trace: Vec<f64>,
}

impl VariationalPosterior {
    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    /// Expected cluster sizes `N̄_k`.
    pub fn counts(&self) -> Vec<f64> {
        (0..self.k).map(|k| self.phi.column(k).sum()).collect()
    }

    /// `E[θ_k]` under the stick posterior.
    pub fn expected_weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k);
        let mut rest = 1.0;
        for k in 0..self.k {
            if k + 1 == self.k {
                out.push(rest);
            } else {
                let ev = self.gamma1[k] / (self.gamma1[k] + self.gamma2[k]);
                out.push(rest * ev);
                rest *= 1.0 - ev;
            }
        }
        out
    }

    /// Posterior mean covariance of cluster `k`, `E[Γ_k]⁻¹ = B_k / a_k`.
    pub fn cluster_covariance(&self, k: usize) -> DMatrix<f64> {
        &self.b[k] / self.a[k]
    }

    pub fn effective_clusters(&self, threshold: f64) -> usize {
        self.counts().iter().filter(|&&c| c > threshold).count()
    }

    pub fn elbo(&self) -> Option<f64> {
        self.elbo_trace.last().copied()
    }
}

fn check_data(data: &[DVector<f64>], prior: &VbPrior) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("variational fit needs at least one point".into()));
    }
    let p = prior.dim();
    for x in data {
        if x.len() != p {
            return Err(Error::Dimension {
                what: "VB data row",
                expected: p,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite VB data row".into()));
        }
    }
    Ok(())
}

/// Random responsibilities and prior-valued cluster parameters.
pub fn vb_init<R: Rng + ?Sized>(
    data: &[DVector<f64>],
    prior: &VbPrior,
    k_trunc: usize,
    rng: &mut R,
) -> Result<VariationalPosterior> {
    check_data(data, prior)?;
    if k_trunc == 0 {
        return Err(Error::Config("k_trunc must be at least 1".into()));
    }
    let n = data.len();
    let k = n.min(k_trunc);
    let mut phi = DMatrix::zeros(n, k);
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..k {
            let u: f64 = rng.random();
            phi[(i, j)] = u;
            s += u;
        }
        if s > 0.0 {
            for j in 0..k {
                phi[(i, j)] /= s;
            }
        } else {
            phi.row_mut(i).fill(1.0 / k as f64);
        }
    }
    Ok(VariationalPosterior {
        k,
        phi,
        gamma1: vec![1.0; k - 1],
        gamma2: vec![prior.a_v0 / prior.b_v0; k - 1],
        m: vec![prior.m0.clone(); k],
        beta: vec![prior.beta0; k],
        a: vec![prior.a0; k],
        b: vec![prior.b0.clone(); k],
        a_v: prior.a_v0,
        b_v: prior.b_v0,
        elbo_trace: Vec::new(),
    })
}

/// `E[ln v_k]` and `E[ln(1 − v_k)]` for the K − 1 free sticks.
fn stick_expectations(vp: &VariationalPosterior) -> (Vec<f64>, Vec<f64>) {
    let mut e_ln_v = Vec::with_capacity(vp.k);
    let mut e_ln_1mv = Vec::with_capacity(vp.k);
    for k in 0..vp.k.saturating_sub(1) {
        let s = digamma(vp.gamma1[k] + vp.gamma2[k]);
        e_ln_v.push(digamma(vp.gamma1[k]) - s);
        e_ln_1mv.push(digamma(vp.gamma2[k]) - s);
    }
    (e_ln_v, e_ln_1mv)
}

/// `E[ln θ_k] = E[ln v_k] + Σ_{j<k} E[ln(1 − v_j)]`, with `v_K = 1`.
fn expected_log_weights(vp: &VariationalPosterior) -> Vec<f64> {
    let (e_ln_v, e_ln_1mv) = stick_expectations(vp);
    let mut out = Vec::with_capacity(vp.k);
    let mut acc = 0.0;
    for k in 0..vp.k {
        let ev = if k + 1 < vp.k { e_ln_v[k] } else { 0.0 };
        out.push(ev + acc);
        if k + 1 < vp.k {
            acc += e_ln_1mv[k];
        }
    }
    out
}

struct ClusterTerms {
    b_inv: Vec<DMatrix<f64>>,
    e_ln_det: Vec<f64>,
    ln_det_b: Vec<f64>,
}

fn cluster_terms(vp: &VariationalPosterior) -> Result<ClusterTerms> {
    let p = vp.m[0].len();
    let mut b_inv = Vec::with_capacity(vp.k);
    let mut e_ln_det = Vec::with_capacity(vp.k);
    let mut ln_det_b = Vec::with_capacity(vp.k);
    for k in 0..vp.k {
        let (inv, ld) = spd_inverse_log_det(&vp.b[k], &format!("Wishart scale of cluster {k}"))?;
        e_ln_det.push(wishart_digamma_sum(vp.a[k], p) + p as f64 * std::f64::consts::LN_2 - ld);
        b_inv.push(inv);
        ln_det_b.push(ld);
    }
    Ok(ClusterTerms {
        b_inv,
        e_ln_det,
        ln_det_b,
    })
}

/// `E[ln N(x | μ_k, Γ_k⁻¹)]` under q(μ_k, Γ_k).
fn expected_loglik(vp: &VariationalPosterior, terms: &ClusterTerms, x: &DVector<f64>, k: usize) -> f64 {
    let p = x.len() as f64;
    let diff = x - &vp.m[k];
    let quad = p / vp.beta[k] + vp.a[k] * (&terms.b_inv[k] * &diff).dot(&diff);
    0.5 * terms.e_ln_det[k] - 0.5 * p * LN_2PI - 0.5 * quad
}

/// Responsibilities and concentration update.
pub fn e_step(vp: &mut VariationalPosterior, data: &[DVector<f64>], prior: &VbPrior) -> Result<()> {
    let terms = cluster_terms(vp)?;
    let e_ln_theta = expected_log_weights(vp);
    let mut row = vec![0.0; vp.k];
    for (i, x) in data.iter().enumerate() {
        for k in 0..vp.k {
            row[k] = e_ln_theta[k] + expected_loglik(vp, &terms, x, k);
        }
        let lse = log_sum_exp(&row);
        for k in 0..vp.k {
            vp.phi[(i, k)] = (row[k] - lse).exp();
        }
    }
    let (_, e_ln_1mv) = stick_expectations(vp);
    vp.a_v = prior.a_v0 + vp.k as f64 - 1.0;
    vp.b_v = prior.b_v0 - e_ln_1mv.iter().sum::<f64>();
    Ok(())
}

/// Responsibilities of new points under a fitted posterior (one row each).
pub fn responsibilities(vp: &VariationalPosterior, points: &[DVector<f64>]) -> Result<Vec<Vec<f64>>> {
    let terms = cluster_terms(vp)?;
    let e_ln_theta = expected_log_weights(vp);
    points
        .iter()
        .map(|x| {
            if x.len() != vp.m[0].len() {
                return Err(Error::Dimension {
                    what: "VB point",
                    expected: vp.m[0].len(),
                    got: x.len(),
                });
            }
            let row: Vec<f64> = (0..vp.k)
                .map(|k| e_ln_theta[k] + expected_loglik(vp, &terms, x, k))
                .collect();
            let lse = log_sum_exp(&row);
            Ok(row.iter().map(|r| (r - lse).exp()).collect())
        })
        .collect()
}

/// Stick and Normal–Wishart updates given the responsibilities.
pub fn m_step(vp: &mut VariationalPosterior, data: &[DVector<f64>], prior: &VbPrior) {
    let counts = vp.counts();
    let e_alpha = vp.a_v / vp.b_v;
    let mut tail = 0.0;
    for k in (0..vp.k).rev() {
        if k + 1 < vp.k {
            vp.gamma1[k] = 1.0 + counts[k];
            vp.gamma2[k] = e_alpha + tail;
        }
        tail += counts[k];
    }
    let p = prior.dim();
    for k in 0..vp.k {
        let nk = counts[k];
        if nk <= 0.0 {
            vp.m[k] = prior.m0.clone();
            vp.beta[k] = prior.beta0;
            vp.a[k] = prior.a0;
            vp.b[k] = prior.b0.clone();
            continue;
        }
        let mut mean = DVector::zeros(p);
        for (i, x) in data.iter().enumerate() {
            mean.axpy(vp.phi[(i, k)], x, 1.0);
        }
        mean /= nk;
        let mut scatter = DMatrix::zeros(p, p);
        for (i, x) in data.iter().enumerate() {
            let d = x - &mean;
            scatter.ger(vp.phi[(i, k)], &d, &d, 1.0);
        }
        let beta = prior.beta0 + nk;
        let dm = &mean - &prior.m0;
        vp.m[k] = (&prior.m0 * prior.beta0 + &mean * nk) / beta;
        vp.beta[k] = beta;
        vp.a[k] = prior.a0 + nk;
        let mut b = &prior.b0 + scatter;
        b.ger(prior.beta0 * nk / beta, &dm, &dm, 1.0);
        // keep exact symmetry
        vp.b[k] = (&b + b.transpose()) * 0.5;
    }
}

/// `KL(Gam(a_q, b_q) ‖ Gam(a_p, b_p))`, shape–rate parameterization.
pub fn kl_gamma(a_q: f64, b_q: f64, a_p: f64, b_p: f64) -> Result<f64> {
    if !(a_q > 0.0 && b_q > 0.0 && a_p > 0.0 && b_p > 0.0) {
        return Err(Error::Numeric("gamma KL needs positive parameters".into()));
    }
    Ok((a_q - a_p) * digamma(a_q) - ln_gamma(a_q) + ln_gamma(a_p) + a_p * (b_q.ln() - b_p.ln())
        + a_q * (b_p - b_q) / b_q)
}

/// `KL(Beta(a_q, b_q) ‖ Beta(a_p, b_p))`.
pub fn kl_beta(a_q: f64, b_q: f64, a_p: f64, b_p: f64) -> Result<f64> {
    if !(a_q > 0.0 && b_q > 0.0 && a_p > 0.0 && b_p > 0.0) {
        return Err(Error::Numeric("beta KL needs positive parameters".into()));
    }
    Ok(ln_beta(a_p, b_p) - ln_beta(a_q, b_q)
        + (a_q - a_p) * digamma(a_q)
        + (b_q - b_p) * digamma(b_q)
        + (a_p - a_q + b_p - b_q) * digamma(a_q + b_q))
}

/// `KL(N(m_q, S_q) ‖ N(m_p, S_p))`.
pub fn kl_normal(m_q: &DVector<f64>, s_q: &DMatrix<f64>, m_p: &DVector<f64>, s_p: &DMatrix<f64>) -> Result<f64> {
    let p = m_q.len() as f64;
    let (sp_inv, ld_p) = spd_inverse_log_det(s_p, "normal KL covariance")?;
    let (_, ld_q) = spd_inverse_log_det(s_q, "normal KL covariance")?;
    let dm = m_p - m_q;
    Ok(0.5 * ((&sp_inv * s_q).trace() + (&sp_inv * &dm).dot(&dm) - p + ld_p - ld_q))
}

/// `KL(W(a_q, B_q⁻¹) ‖ W(a_p, B_p⁻¹))` with scale matrices `B⁻¹`.
pub fn kl_wishart(a_q: f64, b_q: &DMatrix<f64>, a_p: f64, b_p: &DMatrix<f64>) -> Result<f64> {
    let p = b_q.nrows();
    if a_q <= p as f64 - 1.0 || a_p <= p as f64 - 1.0 {
        return Err(Error::Numeric("Wishart KL needs dof > dimension − 1".into()));
    }
    let (bq_inv, ld_q) = spd_inverse_log_det(b_q, "Wishart KL scale")?;
    let (_, ld_p) = spd_inverse_log_det(b_p, "Wishart KL scale")?;
    // With V = B⁻¹: ln|V_p⁻¹ V_q| = ln|B_p| − ln|B_q|, tr(V_p⁻¹ V_q) = tr(B_p B_q⁻¹).
    let tr = (b_p * &bq_inv).trace();
    Ok(-0.5 * a_p * (ld_p - ld_q) + 0.5 * a_q * (tr - p as f64) + ln_multigamma(a_p / 2.0, p)
        - ln_multigamma(a_q / 2.0, p)
        + 0.5 * (a_q - a_p) * wishart_digamma_sum(a_q, p))
}

/// Evidence lower bound of the current posterior.
pub fn elbo(vp: &VariationalPosterior, data: &[DVector<f64>], prior: &VbPrior) -> Result<f64> {
    let terms = cluster_terms(vp)?;
    let e_ln_theta = expected_log_weights(vp);
    let p = prior.dim() as f64;

    let mut loglik = 0.0;
    let mut assign = 0.0;
    let mut entropy = 0.0;
    for (i, x) in data.iter().enumerate() {
        for k in 0..vp.k {
            let f = vp.phi[(i, k)];
            if f > 0.0 {
                loglik += f * expected_loglik(vp, &terms, x, k);
                assign += f * e_ln_theta[k];
                entropy -= f * f.ln();
            }
        }
    }

    let e_alpha = vp.a_v / vp.b_v;
    let e_ln_alpha = digamma(vp.a_v) - vp.b_v.ln();
    let mut kl_sticks = 0.0;
    for k in 0..vp.k.saturating_sub(1) {
        kl_sticks += kl_beta(vp.gamma1[k], vp.gamma2[k], 1.0, e_alpha)? - (e_ln_alpha - e_alpha.ln());
    }
    let kl_conc = kl_gamma(vp.a_v, vp.b_v, prior.a_v0, prior.b_v0)?;

    let (_, ld_b0) = spd_inverse_log_det(&prior.b0, "prior Wishart scale")?;
    let mut kl_nw = 0.0;
    for k in 0..vp.k {
        let w = -0.5 * prior.a0 * (ld_b0 - terms.ln_det_b[k])
            + 0.5 * vp.a[k] * ((&prior.b0 * &terms.b_inv[k]).trace() - p)
            + ln_multigamma(prior.a0 / 2.0, prior.dim())
            - ln_multigamma(vp.a[k] / 2.0, prior.dim())
            + 0.5 * (vp.a[k] - prior.a0) * wishart_digamma_sum(vp.a[k], prior.dim());
        let dm = &vp.m[k] - &prior.m0;
        let n = 0.5
            * (p * prior.beta0 / vp.beta[k] - p + p * (vp.beta[k] / prior.beta0).ln()
                + prior.beta0 * vp.a[k] * (&terms.b_inv[k] * &dm).dot(&dm));
        kl_nw += w + n;
    }
    let value = loglik + assign + entropy - kl_sticks - kl_conc - kl_nw;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("ELBO is not finite ({value})")));
    }
    Ok(value)
}

/// Slack allowed on an ELBO decrease before the fit is declared broken.
pub const ELBO_SLACK: f64 = 1e-6;

/// Iterates E and M steps until the ELBO gain drops below `tol`.
pub fn run_vem<R: Rng + ?Sized>(
    data: &[DVector<f64>],
    prior: &VbPrior,
    k_trunc: usize,
    rng: &mut R,
    max_iter: usize,
    tol: f64,
) -> Result<VariationalPosterior> {
    if max_iter == 0 || !(tol > 0.0) {
        return Err(Error::Config("run_vem needs max_iter ≥ 1 and tol > 0".into()));
    }
    let mut vp = vb_init(data, prior, k_trunc, rng)?;
    m_step(&mut vp, data, prior);
    let mut prev = f64::NEG_INFINITY;
    for iteration in 0..max_iter {
        e_step(&mut vp, data, prior)?;
        m_step(&mut vp, data, prior);
        let value = elbo(&vp, data, prior)?;
        vp.elbo_trace.push(value);
        let scale = value.abs().max(1.0);
        if value < prev - ELBO_SLACK * scale {
            return Err(Error::ElboDecrease {
                iteration,
                drop: prev - value,
            });
        }
        if value - prev < tol {
            break;
        }
        prev = value;
    }
    Ok(vp)
}
