//! Cross-user coupling: the demographics loading Δ, the population mixture
//! fitted over per-(user, state) Λ summaries, and the refresh of every
//! cloud's priors from that fit.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conjugate::posterior_gamma;
use crate::error::{Error, Result};
use crate::filter::{gamma_from_lambda, sample_categorical, LambdaComponent, LambdaPrior, ParticleCloud};
use crate::linalg::{psd_factor, sample_with_factor, std_normal_vec};
use crate::model::HyperParams;
use crate::rng::{purpose, stream};
use crate::vb::{responsibilities, VariationalPosterior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub user_id: String,
    #[serde(rename = "D")]
    pub d: Vec<f64>,
}

impl Demographics {
    pub fn validate(&self, d_demo: usize) -> Result<()> {
        if self.d.len() != d_demo {
            return Err(Error::Dimension {
                what: "demographics vector",
                expected: d_demo,
                got: self.d.len(),
            });
        }
        if self.d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("user {}: non-finite demographics", self.user_id)));
        }
        Ok(())
    }
}

/// Demographics lookup; users without an entry get the zero vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DemographicsTable {
    pub dim: usize,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl DemographicsTable {
    pub fn new(dim: usize, entries: Vec<Demographics>) -> Result<Self> {
        let mut rows = BTreeMap::new();
        for e in entries {
            e.validate(dim)?;
            if rows.insert(e.user_id.clone(), e.d).is_some() {
                return Err(Error::Data(format!("duplicate demographics for user {}", e.user_id)));
            }
        }
        Ok(Self { dim, rows })
    }

    pub fn get(&self, user_id: &str) -> DVector<f64> {
        match self.rows.get(user_id) {
            Some(d) => DVector::from_column_slice(d),
            None => {
                if self.dim > 0 {
                    warn!("user {user_id} has no demographics; using the zero vector");
                }
                DVector::zeros(self.dim)
            }
        }
    }
}

/// One regression row for Δ: `target ≈ Δ · demographics` with independent
/// per-coordinate noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaObservation {
    pub demographics: DVector<f64>,
    pub target: DVector<f64>,
    pub noise_var: DVector<f64>,
}

/// Independent normal posterior for each row of Δ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPosterior {
    pub mean: DMatrix<f64>,
    /// Covariance of each row (d_D × d_D).
    pub row_cov: Vec<DMatrix<f64>>,
}

impl DeltaPosterior {
    pub fn prior(mean: &DMatrix<f64>, var: f64) -> Self {
        let d_demo = mean.ncols();
        Self {
            mean: mean.clone(),
            row_cov: vec![DMatrix::identity(d_demo, d_demo) * var; mean.nrows()],
        }
    }

    pub fn std_dev(&self, row: usize, col: usize) -> f64 {
        self.row_cov[row][(col, col)].max(0.0).sqrt()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let mut out = self.mean.clone();
        for r in 0..self.mean.nrows() {
            let mean = self.mean.row(r).transpose();
            let draw = sample_with_factor(&mean, &psd_factor(&self.row_cov[r]), rng);
            out.set_row(r, &draw.transpose());
        }
        out
    }
}

/// Conjugate update of Δ, one regression per output coordinate, with prior
/// `N(prior_mean[r, ·], prior_var · I)` on every row.
pub fn update_delta(obs: &[DeltaObservation], prior_mean: &DMatrix<f64>, prior_var: f64) -> Result<DeltaPosterior> {
    let (p, d_demo) = prior_mean.shape();
    if !(prior_var >= 0.0) || !prior_var.is_finite() {
        return Err(Error::Config("Δ prior variance must be finite and nonnegative".into()));
    }
    if prior_var == 0.0 || obs.is_empty() || d_demo == 0 {
        return Ok(DeltaPosterior::prior(prior_mean, prior_var));
    }
    for o in obs {
        if o.demographics.len() != d_demo {
            return Err(Error::Dimension {
                what: "Δ regressor",
                expected: d_demo,
                got: o.demographics.len(),
            });
        }
        if o.target.len() != p || o.noise_var.len() != p {
            return Err(Error::Dimension {
                what: "Δ target",
                expected: p,
                got: o.target.len(),
            });
        }
        if o.noise_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Numeric("Δ regression noise variance must be positive".into()));
        }
    }
    let mut mean = DMatrix::zeros(p, d_demo);
    let mut row_cov = Vec::with_capacity(p);
    for r in 0..p {
        let mut precision = DMatrix::identity(d_demo, d_demo) / prior_var;
        let mut rhs = prior_mean.row(r).transpose() / prior_var;
        for o in obs {
            let w = 1.0 / o.noise_var[r];
            precision.ger(w, &o.demographics, &o.demographics, 1.0);
            rhs.axpy(w * o.target[r], &o.demographics, 1.0);
        }
        let ch = precision
            .cholesky()
            .ok_or_else(|| Error::Numeric("Δ posterior precision is not positive definite".into()))?;
        let m = ch.solve(&rhs);
        mean.set_row(r, &m.transpose());
        row_cov.push(ch.inverse());
    }
    Ok(DeltaPosterior { mean, row_cov })
}

/// A (user, state) row of the population fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRow {
    pub user_id: String,
    pub state: usize,
    pub demographics: DVector<f64>,
    /// Particle-averaged Λ estimate: posterior mean of Γ followed by the
    /// state's log-variances.
    pub lambda: DVector<f64>,
}

/// Particle-averaged Λ estimates for every state visited in `cloud`.
pub fn summarize_cloud(cloud: &ParticleCloud) -> Result<Vec<(usize, DVector<f64>)>> {
    let mut sums: Vec<(DVector<f64>, usize)> = Vec::new();
    for p in &cloud.particles {
        for (l, st) in p.states.iter().enumerate() {
            if st.stats.n == 0 {
                continue;
            }
            let d = st.gamma.len();
            let post = posterior_gamma(&st.stats, &st.lambda)?;
            let mut v = st.lambda.clone();
            v.rows_mut(0, d).copy_from(&post.mean);
            if sums.len() <= l {
                sums.resize(l + 1, (DVector::zeros(2 * d), 0));
            }
            sums[l].0 += v;
            sums[l].1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(l, (s, n))| (l, s / n as f64))
        .collect())
}

/// Regression rows for Δ: each Λ row minus its expected cluster mean, with the
/// expected cluster variance as noise. Without a population fit the baseline
/// prior plays the single cluster.
pub fn delta_observations(
    rows: &[LambdaRow],
    vp: Option<(&VariationalPosterior, &DMatrix<f64>)>,
    hp: &HyperParams,
) -> Result<Vec<DeltaObservation>> {
    let p = hp.lambda_mean.len();
    match vp {
        None => {
            let inflate = 1.0 + 1.0 / hp.mean_precision;
            let noise = DVector::from_fn(p, |i, _| hp.wishart_scale[(i, i)] / hp.wishart_dof * inflate);
            Ok(rows
                .iter()
                .map(|r| DeltaObservation {
                    demographics: r.demographics.clone(),
                    target: &r.lambda - &hp.lambda_mean,
                    noise_var: noise.clone(),
                })
                .collect())
        }
        Some((vp, delta)) => {
            let resid: Vec<DVector<f64>> = rows.iter().map(|r| &r.lambda - delta * &r.demographics).collect();
            let phi = responsibilities(vp, &resid)?;
            Ok(rows
                .iter()
                .zip(phi)
                .map(|(r, w)| {
                    let mut centre = DVector::zeros(p);
                    let mut noise = DVector::zeros(p);
                    for (k, wk) in w.iter().enumerate() {
                        centre.axpy(*wk, &vp.m[k], 1.0);
                        let cov = vp.cluster_covariance(k);
                        for i in 0..p {
                            noise[i] += wk * cov[(i, i)];
                        }
                    }
                    DeltaObservation {
                        demographics: r.demographics.clone(),
                        target: &r.lambda - centre,
                        noise_var: noise.map(|v: f64| v.max(1e-12)),
                    }
                })
                .collect())
        }
    }
}

/// The mixture prior over Λ for a user with demographics shift `shift = ΔD`.
pub fn mixture_prior(vp: &VariationalPosterior, shift: &DVector<f64>) -> LambdaPrior {
    LambdaPrior {
        weights: vp.expected_weights(),
        components: (0..vp.k)
            .map(|k| LambdaComponent::new(shift + &vp.m[k], vp.cluster_covariance(k)))
            .collect(),
    }
}

/// Redraws cluster labels, Λ and Γ for every state of every particle in
/// `cloud`, and replaces its new-state prior with the fitted mixture.
///
/// `state_resp` maps a state index to its responsibility row; states without
/// a row draw their cluster from the expected mixture weights.
pub fn refresh_particle_priors(
    vp: &VariationalPosterior,
    delta: &DMatrix<f64>,
    demographics: &DVector<f64>,
    state_resp: &BTreeMap<usize, Vec<f64>>,
    cloud: &mut ParticleCloud,
    seed: u64,
    tick: u64,
) -> Result<()> {
    let shift = delta * demographics;
    let prior = mixture_prior(vp, &shift);
    let tag = cloud.user_tag;
    cloud.particles.par_iter_mut().enumerate().try_for_each(|(i, p)| -> Result<()> {
        let mut rng = stream(seed, &[tag, tick, purpose::REFRESH, i as u64]);
        for (l, st) in p.states.iter_mut().enumerate() {
            let c = match state_resp.get(&l) {
                Some(w) => sample_categorical(w, &mut rng),
                None => prior.sample_cluster(&mut rng),
            };
            let comp = &prior.components[c];
            let z = std_normal_vec(comp.mean.len(), &mut rng);
            st.lambda = &comp.mean + psd_factor(&comp.cov) * z;
            st.cluster = c;
            st.gamma = if st.stats.n > 0 {
                posterior_gamma(&st.stats, &st.lambda)?.sample(&mut rng)
            } else {
                gamma_from_lambda(&st.lambda, &mut rng)
            };
        }
        p.fresh = prior.draw_state(&mut rng);
        Ok(())
    })?;
    cloud.lambda_prior = prior;
    Ok(())
}

/// When the hierarchical step runs: every `period` global ticks, or never.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarrierSchedule {
    pub period: Option<u64>,
}

impl Default for BarrierSchedule {
    fn default() -> Self {
        Self { period: Some(25) }
    }
}

impl BarrierSchedule {
    pub fn every(period: u64) -> Result<Self> {
        if period == 0 {
            return Err(Error::Config("barrier period must be positive".into()));
        }
        Ok(Self { period: Some(period) })
    }

    pub fn disabled() -> Self {
        Self { period: None }
    }

    pub fn is_due(&self, tick: u64) -> bool {
        matches!(self.period, Some(p) if tick > 0 && tick % p == 0)
    }

    /// Number of barriers over ticks `1..=t_len`.
    pub fn count(&self, t_len: u64) -> u64 {
        self.period.map_or(0, |p| t_len / p)
    }
}
