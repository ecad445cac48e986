//! Ground truth on tiny truncated instances: exhaustive path enumeration
//! (two independent enumerators) and a collapsed Gibbs sampler over the
//! state path with the transition rows integrated out.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conjugate::{integrated_loglik, SufficientStats};
use crate::error::{Error, Result};
use crate::filter::{filter_stream, FilterConfig, FrozenParams};
use crate::fsf;
use crate::model::{HyperParams, ObservationRecord};
use crate::rng::{purpose, stream};
use crate::smoother::smooth;
use crate::special::{ln_gamma, log_logistic_lik, log_sum_exp};

pub const MAX_T: usize = 8;
pub const MAX_K: usize = 3;

/// Emission model of a tiny instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Emission {
    /// Known Γ per state, exact logistic likelihood.
    Fixed(Vec<DVector<f64>>),
    /// Augmented utilities with frozen `(U, z)` per site and a conjugate
    /// normal prior on Γ (Λ layout: means then log-variances).
    Conjugate {
        prior: DVector<f64>,
        u: Vec<f64>,
        z: Vec<usize>,
    },
    /// Scalar Γ per state with a `N(mean, var)` prior, integrated against the
    /// exact logistic likelihood by trapezoid quadrature. Uses `x[t][0]`.
    LogitQuadrature { mean: f64, var: f64 },
}

/// A truncated instance: `K = beta.len()` states, state 0 at the first site,
/// and `initial_self_count` transitions 0 → 0 present before the first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyInstance {
    pub y: Vec<bool>,
    pub x: Vec<Vec<f64>>,
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub initial_self_count: u32,
    pub emission: Emission,
}

impl TinyInstance {
    /// T = 3, K = 2, α = 1, β = (0.6, 0.4), Γ = (1.5, −1.5), x = 1, y = (1, 0, 0).
    pub fn bundled() -> Self {
        Self {
            y: vec![true, false, false],
            x: vec![vec![1.0]; 3],
            alpha: 1.0,
            beta: vec![0.6, 0.4],
            initial_self_count: 1,
            emission: Emission::Fixed(vec![DVector::from_vec(vec![1.5]), DVector::from_vec(vec![-1.5])]),
        }
    }

    pub fn k(&self) -> usize {
        self.beta.len()
    }

    pub fn t_len(&self) -> usize {
        self.y.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (t, k) = (self.t_len(), self.k());
        if t == 0 || t > MAX_T || k == 0 || k > MAX_K {
            return Err(Error::TooLarge(format!(
                "exact enumeration needs 1 ≤ T ≤ {MAX_T} and 1 ≤ K ≤ {MAX_K}, got T={t}, K={k}"
            )));
        }
        if self.x.len() != t {
            return Err(Error::Dimension {
                what: "instance covariates",
                expected: t,
                got: self.x.len(),
            });
        }
        let s: f64 = self.beta.iter().sum();
        if (s - 1.0).abs() > 1e-12 || self.beta.iter().any(|b| !(*b > 0.0)) || !(self.alpha > 0.0) {
            return Err(Error::Config("instance needs α > 0 and a positive β summing to one".into()));
        }
        match &self.emission {
            Emission::Fixed(g) if g.len() != k => Err(Error::Dimension {
                what: "fixed emission parameters",
                expected: k,
                got: g.len(),
            }),
            Emission::Conjugate { u, z, .. } if u.len() != t || z.len() != t => Err(Error::Dimension {
                what: "frozen utilities",
                expected: t,
                got: u.len().min(z.len()),
            }),
            Emission::LogitQuadrature { var, .. } if !(*var > 0.0) => {
                Err(Error::Config("quadrature prior variance must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Labeling {
    /// Every label is a fixed state with its own β and Γ.
    Fixed,
    /// Only paths whose labels appear in order 0, 1, 2, … are enumerated;
    /// label `k` is the `k`-th state opened, as in the particle filter.
    FirstAppearance,
}

pub type PathDistribution = BTreeMap<Vec<usize>, f64>;

fn all_paths(inst: &TinyInstance, labeling: Labeling) -> Vec<Vec<usize>> {
    let (t_len, k) = (inst.t_len(), inst.k());
    let mut out = Vec::new();
    let total = k.pow((t_len - 1) as u32);
    for code in 0..total {
        let mut path = vec![0usize; t_len];
        let mut c = code;
        for s in path.iter_mut().skip(1) {
            *s = c % k;
            c /= k;
        }
        if labeling == Labeling::FirstAppearance {
            let mut max = 0;
            let ok = path.iter().all(|&s| {
                if s > max + 1 {
                    return false;
                }
                max = max.max(s);
                true
            });
            if !ok {
                continue;
            }
        }
        out.push(path);
    }
    out
}

fn quadrature_log_evidence(mean: f64, var: f64, sites: &[(f64, bool)]) -> f64 {
    let sd = var.sqrt();
    let n = 1201;
    let (lo, hi) = (mean - 12.0 * sd, mean + 12.0 * sd);
    let h = (hi - lo) / (n - 1) as f64;
    let terms: Vec<f64> = (0..n)
        .map(|i| {
            let g = lo + h * i as f64;
            let w: f64 = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let lp = -0.5 * ((g - mean) / sd).powi(2) - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
            let ll: f64 = sites.iter().map(|&(x, y)| log_logistic_lik(g * x, y)).sum();
            w.ln() + lp + ll
        })
        .collect();
    log_sum_exp(&terms) + h.ln()
}

/// Emission log-likelihood of a whole path, by sequential chain rule.
fn path_emission_sequential(inst: &TinyInstance, path: &[usize]) -> Result<f64> {
    match &inst.emission {
        Emission::Fixed(g) => Ok(path
            .iter()
            .enumerate()
            .map(|(t, &s)| {
                let v: f64 = g[s].iter().zip(&inst.x[t]).map(|(a, b)| a * b).sum();
                log_logistic_lik(v, inst.y[t])
            })
            .sum()),
        Emission::Conjugate { prior, u, z } => {
            let d = prior.len() / 2;
            let mut stats = vec![SufficientStats::new(d); inst.k()];
            let mut total = 0.0;
            for (t, &s) in path.iter().enumerate() {
                total += integrated_loglik(&stats[s], prior, &inst.x[t], u[t], z[t])?;
                stats[s].update(&inst.x[t], u[t], z[t]);
            }
            Ok(total)
        }
        Emission::LogitQuadrature { mean, var } => Ok((0..inst.k())
            .map(|k| {
                let sites: Vec<(f64, bool)> = path
                    .iter()
                    .enumerate()
                    .filter(|(_, &s)| s == k)
                    .map(|(t, _)| (inst.x[t][0], inst.y[t]))
                    .collect();
                if sites.is_empty() {
                    0.0
                } else {
                    quadrature_log_evidence(*mean, *var, &sites)
                }
            })
            .sum()),
    }
}

/// Emission log-likelihood of a whole path, by joint evaluation per state.
fn path_emission_joint(inst: &TinyInstance, path: &[usize]) -> Result<f64> {
    match &inst.emission {
        Emission::Conjugate { prior, u, z } => {
            let d = prior.len() / 2;
            let table = fsf::table();
            let mut total = 0.0;
            for k in 0..inst.k() {
                let sites: Vec<usize> = (0..path.len()).filter(|&t| path[t] == k).collect();
                let n = sites.len();
                if n == 0 {
                    continue;
                }
                let mut cov = DMatrix::zeros(n, n);
                let mut r = DVector::zeros(n);
                for (a, &ta) in sites.iter().enumerate() {
                    r[a] = u[ta] - table.mu[z[ta]] - (0..d).map(|i| inst.x[ta][i] * prior[i]).sum::<f64>();
                    for (b, &tb) in sites.iter().enumerate() {
                        cov[(a, b)] = (0..d).map(|i| inst.x[ta][i] * prior[d + i].exp() * inst.x[tb][i]).sum();
                    }
                    cov[(a, a)] += table.variance(z[ta]);
                }
                let ch = cov
                    .cholesky()
                    .ok_or_else(|| Error::Numeric("joint emission covariance not positive definite".into()))?;
                let sol = ch.solve(&r);
                let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                total += -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&sol));
            }
            Ok(total)
        }
        _ => path_emission_sequential(inst, path),
    }
}

/// Prior log-probability of a path, by sequential urn updates.
fn path_prior_sequential(inst: &TinyInstance, path: &[usize]) -> f64 {
    let k = inst.k();
    let mut n = vec![vec![0u32; k]; k];
    n[0][0] = inst.initial_self_count;
    let mut lp = 0.0;
    for w in path.windows(2) {
        let (a, b) = (w[0], w[1]);
        let row: u32 = n[a].iter().sum();
        lp += ((n[a][b] as f64 + inst.alpha * inst.beta[b]) / (row as f64 + inst.alpha)).ln();
        n[a][b] += 1;
    }
    lp
}

/// Prior log-probability of a path, from the closed-form Dirichlet-multinomial
/// product over rows.
fn path_prior_closed_form(inst: &TinyInstance, path: &[usize]) -> f64 {
    let k = inst.k();
    let mut n = vec![vec![0u32; k]; k];
    for w in path.windows(2) {
        n[w[0]][w[1]] += 1;
    }
    let a = inst.alpha;
    let mut lp = 0.0;
    for i in 0..k {
        let base = |j: usize| if i == 0 && j == 0 { inst.initial_self_count as f64 } else { 0.0 };
        let n0: f64 = (0..k).map(base).sum();
        let n_row: f64 = n[i].iter().map(|&c| c as f64).sum();
        lp += ln_gamma(a + n0) - ln_gamma(a + n0 + n_row);
        for j in 0..k {
            let c = a * inst.beta[j] + base(j);
            lp += ln_gamma(c + n[i][j] as f64) - ln_gamma(c);
        }
    }
    lp
}

fn normalize(mut logs: Vec<(Vec<usize>, f64)>) -> PathDistribution {
    let lse = log_sum_exp(&logs.iter().map(|p| p.1).collect::<Vec<_>>());
    logs.drain(..).map(|(p, l)| (p, (l - lse).exp())).collect()
}

/// Exact posterior over state paths by exhaustive enumeration.
pub fn exact_posterior(inst: &TinyInstance, labeling: Labeling) -> Result<PathDistribution> {
    inst.validate()?;
    let logs = all_paths(inst, labeling)
        .into_iter()
        .map(|p| {
            let l = path_prior_sequential(inst, &p) + path_emission_sequential(inst, &p)?;
            Ok((p, l))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize(logs))
}

/// Second enumerator: closed-form path prior and joint emission evidence.
pub fn exact_posterior_closed_form(inst: &TinyInstance, labeling: Labeling) -> Result<PathDistribution> {
    inst.validate()?;
    let logs = all_paths(inst, labeling)
        .into_iter()
        .map(|p| {
            let l = path_prior_closed_form(inst, &p) + path_emission_joint(inst, &p)?;
            Ok((p, l))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize(logs))
}

/// Transition factor of the collapsed conditional for site `t` taking state
/// `k`, with counts that exclude the transitions into and out of `t`.
pub fn transition_factor(
    n: &[Vec<u32>],
    alpha: f64,
    beta: &[f64],
    prev: usize,
    k: usize,
    next: Option<usize>,
) -> f64 {
    let first = n[prev][k] as f64 + alpha * beta[k];
    let Some(next) = next else {
        return first;
    };
    let row_k: f64 = n[k].iter().map(|&c| c as f64).sum();
    let num = n[k][next] as f64 + alpha * beta[next];
    if k != prev {
        first * num / (row_k + alpha)
    } else if k == next {
        first * (num + 1.0) / (row_k + 1.0 + alpha)
    } else {
        first * num / (row_k + 1.0 + alpha)
    }
}

/// Normalized full conditional of `path[t]` (t ≥ 1) over the K states.
pub fn gibbs_conditional(inst: &TinyInstance, path: &[usize], t: usize) -> Result<Vec<f64>> {
    let k = inst.k();
    let t_len = path.len();
    let mut n = vec![vec![0u32; k]; k];
    n[0][0] = inst.initial_self_count;
    for (i, w) in path.windows(2).enumerate() {
        if i + 1 == t || i == t {
            continue;
        }
        n[w[0]][w[1]] += 1;
    }
    let next = if t + 1 < t_len { Some(path[t + 1]) } else { None };
    let mut logp = Vec::with_capacity(k);
    for s in 0..k {
        let tr = transition_factor(&n, inst.alpha, &inst.beta, path[t - 1], s, next);
        logp.push(tr.ln() + site_emission(inst, path, t, s)?);
    }
    let lse = log_sum_exp(&logp);
    Ok(logp.into_iter().map(|l| (l - lse).exp()).collect())
}

fn site_emission(inst: &TinyInstance, path: &[usize], t: usize, s: usize) -> Result<f64> {
    let others = |k: usize| (0..path.len()).filter(move |&j| j != t && path[j] == k);
    match &inst.emission {
        Emission::Fixed(g) => {
            let v: f64 = g[s].iter().zip(&inst.x[t]).map(|(a, b)| a * b).sum();
            Ok(log_logistic_lik(v, inst.y[t]))
        }
        Emission::Conjugate { prior, u, z } => {
            let mut st = SufficientStats::new(prior.len() / 2);
            for j in others(s) {
                st.update(&inst.x[j], u[j], z[j]);
            }
            integrated_loglik(&st, prior, &inst.x[t], u[t], z[t])
        }
        Emission::LogitQuadrature { mean, var } => {
            let mut sites: Vec<(f64, bool)> = others(s).map(|j| (inst.x[j][0], inst.y[j])).collect();
            let without = if sites.is_empty() {
                0.0
            } else {
                quadrature_log_evidence(*mean, *var, &sites)
            };
            sites.push((inst.x[t][0], inst.y[t]));
            Ok(quadrature_log_evidence(*mean, *var, &sites) - without)
        }
    }
}

/// Runs `sweeps` systematic-scan sweeps over sites `1..T` after `burn_in`
/// discarded sweeps; returns the empirical path distribution.
pub fn collapsed_gibbs<R: Rng + ?Sized>(
    inst: &TinyInstance,
    sweeps: usize,
    burn_in: usize,
    rng: &mut R,
) -> Result<PathDistribution> {
    inst.validate()?;
    let mut path = vec![0usize; inst.t_len()];
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for sweep in 0..burn_in + sweeps {
        for t in 1..path.len() {
            let p = gibbs_conditional(inst, &path, t)?;
            path[t] = crate::filter::sample_categorical(&p, rng);
        }
        if sweep >= burn_in {
            *counts.entry(path.clone()).or_default() += 1;
        }
    }
    Ok(empirical(counts.into_iter().map(|(p, c)| (p, c as f64))))
}

/// Path distribution implied by the particle filter with the instance's
/// structural parameters frozen, followed by backward smoothing. Labels come
/// out in order of first appearance.
pub fn filter_smoother_paths(
    inst: &TinyInstance,
    particles: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathDistribution> {
    inst.validate()?;
    let Emission::Fixed(gammas) = &inst.emission else {
        return Err(Error::Config("filter comparison needs fixed emission parameters".into()));
    };
    if inst.initial_self_count != 1 {
        return Err(Error::Config("the filter starts from one phantom self-transition".into()));
    }
    let mut hp = HyperParams::for_dim(gammas[0].len(), 0);
    hp.particles = particles;
    hp.seed = seed;
    let config = FilterConfig {
        frozen: Some(FrozenParams {
            alpha: inst.alpha,
            beta: inst.beta.clone(),
            gammas: gammas.clone(),
        }),
        keep_snapshots: true,
        ..FilterConfig::default()
    };
    let obs: Vec<ObservationRecord> = inst
        .y
        .iter()
        .zip(&inst.x)
        .enumerate()
        .map(|(t, (&y, x))| ObservationRecord {
            user_id: "oracle".into(),
            t: t as u64 + 1,
            y,
            x: x.clone(),
        })
        .collect();
    let run = filter_stream(&obs, &hp, &config, None)?;
    let snaps = run.cloud.snapshots.as_ref().expect("snapshots requested");
    let mut rng = stream(seed, &[run.cloud.user_tag, purpose::SMOOTH]);
    let paths = smooth(snaps, n_paths, &mut rng)?;
    Ok(empirical(paths.into_iter().map(|p| (p, 1.0))))
}

/// Normalizes weighted path counts into a distribution.
pub fn empirical(counts: impl IntoIterator<Item = (Vec<usize>, f64)>) -> PathDistribution {
    let mut out: PathDistribution = BTreeMap::new();
    for (p, c) in counts {
        *out.entry(p).or_default() += c;
    }
    let total: f64 = out.values().sum();
    for v in out.values_mut() {
        *v /= total;
    }
    out
}

pub fn total_variation(a: &PathDistribution, b: &PathDistribution) -> f64 {
    let mut tv = 0.0;
    for (p, pa) in a {
        tv += (pa - b.get(p).copied().unwrap_or(0.0)).abs();
    }
    for (p, pb) in b {
        if !a.contains_key(p) {
            tv += pb;
        }
    }
    0.5 * tv
}

/// Per-site marginal probabilities `P(s_t = k)`.
pub fn site_marginals(dist: &PathDistribution, k: usize) -> Vec<Vec<f64>> {
    let t_len = dist.keys().next().map_or(0, |p| p.len());
    let mut m = vec![vec![0.0; k]; t_len];
    for (p, w) in dist {
        for (t, &s) in p.iter().enumerate() {
            if s < k {
                m[t][s] += w;
            }
        }
    }
    m
}
