//! Per-user particle-learning filter for the infinite HMM.
//!
//! Each step weights every particle by its one-step-ahead predictive of the
//! new observation, resamples, propagates the hidden state (possibly opening
//! a new one), absorbs the observation into the realized state's sufficient
//! statistics and refreshes the structural parameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conjugate::{posterior_gamma, SufficientStats};
use crate::error::{Error, Result};
use crate::fsf;
use crate::linalg::{psd_factor, sample_with_factor};
use crate::model::{AuxDraws, HyperParams, ObservationRecord, Particle, StateParams};
use crate::rng::{purpose, stream, user_tag, StreamRng};
use crate::special::{log_logistic_lik, log_sum_exp};
use crate::transition::{
    grow_beta, refresh_structure, sample_alpha, sample_beta_given_m, sample_lambda, StirlingCache,
    TransitionState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Resampling {
    #[default]
    Multinomial,
    Systematic,
}

/// How candidate states are weighted in the one-step-ahead prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Weighting {
    /// Exact logistic probability of the observed choice.
    #[default]
    ExactLogistic,
    /// Draws `(U, z)` given the choice and weights by the normal density of
    /// `U` under the drawn component.
    ConditionalNormal,
}

/// Fixed structural parameters for oracle comparisons on a truncated model.
///
/// States are labelled in order of first appearance: the `k`-th state to be
/// opened gets `beta[k]` and `gammas[k]`. No refresh of α, β, λ or Γ happens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenParams {
    pub alpha: f64,
    /// Base measure over the `K` states; must sum to one.
    pub beta: Vec<f64>,
    pub gammas: Vec<DVector<f64>>,
}

impl FrozenParams {
    fn tail(&self, from: usize) -> f64 {
        self.beta[from..].iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FilterConfig {
    pub resampling: Resampling,
    pub weighting: Weighting,
    pub frozen: Option<FrozenParams>,
    /// Keep per-step particle summaries for smoothing.
    pub keep_snapshots: bool,
}

/// One component of the mixture prior on Λ for states not yet visited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaComponent {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl LambdaComponent {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        let factor = psd_factor(&cov);
        Self { mean, cov, factor }
    }
}

/// Mixture prior over Λ (cluster weights and per-cluster normals) used to
/// draw the cluster index, Λ and Γ of new states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPrior {
    pub weights: Vec<f64>,
    pub components: Vec<LambdaComponent>,
}

impl LambdaPrior {
    /// The baseline single-component prior shifted by the demographics term.
    pub fn baseline(hp: &HyperParams, shift: &DVector<f64>) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![LambdaComponent::new(&hp.lambda_mean + shift, hp.lambda_cov.clone())],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len() / 2
    }

    pub fn sample_cluster<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.weights, rng)
    }

    /// Draws `(c, Λ, Γ)` for a state with no data.
    pub fn draw_state<R: Rng + ?Sized>(&self, rng: &mut R) -> StateParams {
        let c = self.sample_cluster(rng);
        let comp = &self.components[c];
        let lambda = sample_with_factor(&comp.mean, &comp.factor, rng);
        let gamma = gamma_from_lambda(&lambda, rng);
        StateParams {
            gamma,
            stats: SufficientStats::new(lambda.len() / 2),
            lambda,
            cluster: c,
        }
    }
}

/// `Γ ~ N(Λ_mean, diag(exp(Λ_logvar)))`.
pub fn gamma_from_lambda<R: Rng + ?Sized>(lambda: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let d = lambda.len() / 2;
    DVector::from_iterator(
        d,
        (0..d).map(|i| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            lambda[i] + (0.5 * lambda[d + i]).exp() * z
        }),
    )
}

pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let total: f64 = p.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &pi) in p.iter().enumerate() {
        u -= pi;
        if u < 0.0 {
            return i;
        }
    }
    // rounding: last index with positive mass
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

fn sample_log_categorical<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p: Vec<f64> = logp.iter().map(|l| (l - max).exp()).collect();
    sample_categorical(&p, rng)
}

/// Transition probabilities out of a particle's current state, kept for
/// backward smoothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSummary {
    pub s: u32,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: u64,
    pub particles: Vec<ParticleSummary>,
}

fn snapshot(t: u64, particles: &[Particle]) -> Result<Snapshot> {
    let particles = particles
        .iter()
        .map(|p| {
            Ok(ParticleSummary {
                s: p.s as u32,
                probs: p.transition.transition_probs(p.s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Snapshot { t, particles })
}

/// The weighted particle approximation for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleCloud {
    pub user_id: String,
    pub user_tag: u64,
    /// Time index of the last absorbed observation.
    pub t: u64,
    pub particles: Vec<Particle>,
    pub weights: Vec<f64>,
    pub lambda_prior: LambdaPrior,
    pub snapshots: Option<Vec<Snapshot>>,
}

impl ParticleCloud {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// `hist[k]` is the number of particles with `k + 1` states.
    pub fn l_histogram(&self) -> Vec<usize> {
        let max = self.particles.iter().map(|p| p.num_states()).max().unwrap_or(0);
        let mut h = vec![0; max];
        for p in &self.particles {
            h[p.num_states() - 1] += 1;
        }
        h
    }

    pub fn modal_l(&self) -> usize {
        let h = self.l_histogram();
        // ties go to the smaller count
        let mut best = 0;
        for (k, &c) in h.iter().enumerate() {
            if c > h[best] {
                best = k;
            }
        }
        best + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: u64,
    pub log_predictive: f64,
    pub ess: f64,
    pub l_histogram: Vec<usize>,
}

/// Filter machinery shared by all users: hyperparameters, configuration and
/// the Stirling-number table.
#[derive(Debug, Clone)]
pub struct ParticleFilter {
    pub hp: HyperParams,
    pub config: FilterConfig,
    cache: StirlingCache,
}

impl ParticleFilter {
    pub fn new(hp: HyperParams, config: FilterConfig) -> Result<Self> {
        hp.validate()?;
        if let Some(fz) = &config.frozen {
            let s: f64 = fz.beta.iter().sum();
            if fz.beta.is_empty() || (s - 1.0).abs() > 1e-12 || fz.beta.iter().any(|b| !(*b >= 0.0)) {
                return Err(Error::Config("frozen beta must be a probability vector".into()));
            }
            if fz.gammas.len() != fz.beta.len() {
                return Err(Error::Config("frozen gammas and beta lengths differ".into()));
            }
            if !(fz.alpha > 0.0) {
                return Err(Error::Config("frozen alpha must be positive".into()));
            }
            let d = hp.emission_dim();
            if fz.gammas.iter().any(|g| g.len() != d) {
                return Err(Error::Config("frozen gammas must have emission dimension".into()));
            }
        }
        let mut cache = StirlingCache::new();
        cache.ensure(64);
        Ok(Self { hp, config, cache })
    }

    fn check_obs(&self, obs: &ObservationRecord) -> Result<()> {
        let d = self.hp.emission_dim();
        if obs.x.len() != d {
            return Err(Error::Dimension {
                what: "covariate vector",
                expected: d,
                got: obs.x.len(),
            });
        }
        if obs.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("user {} t={}: non-finite covariate", obs.user_id, obs.t)));
        }
        Ok(())
    }

    /// Builds the cloud from a user's first observation.
    pub fn init_cloud(&self, first: &ObservationRecord, lambda_prior: LambdaPrior) -> Result<ParticleCloud> {
        self.check_obs(first)?;
        if lambda_prior.dim() != self.hp.emission_dim() {
            return Err(Error::Dimension {
                what: "Lambda prior",
                expected: 2 * self.hp.emission_dim(),
                got: 2 * lambda_prior.dim(),
            });
        }
        let tag = user_tag(&first.user_id);
        let b = self.hp.particles;
        let particles = (0..b)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(self.hp.seed, &[tag, first.t, purpose::INIT, i as u64]);
                self.init_particle(first, &lambda_prior, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let snapshots = if self.config.keep_snapshots {
            Some(vec![snapshot(first.t, &particles)?])
        } else {
            None
        };
        Ok(ParticleCloud {
            user_id: first.user_id.clone(),
            user_tag: tag,
            t: first.t,
            particles,
            weights: vec![1.0 / b as f64; b],
            lambda_prior,
            snapshots,
        })
    }

    fn init_particle(
        &self,
        first: &ObservationRecord,
        prior: &LambdaPrior,
        rng: &mut StreamRng,
    ) -> Result<Particle> {
        let d = self.hp.emission_dim();
        let (transition, mut state, fresh, mut aux) = match &self.config.frozen {
            Some(fz) => {
                let ts = TransitionState {
                    counts: vec![vec![1]],
                    beta: vec![fz.beta[0], fz.tail(1)],
                    alpha: fz.alpha,
                    lambda: 1.0,
                };
                let state = frozen_state(fz, 0, d);
                let fresh = frozen_state(fz, 1, d);
                (ts, state, fresh, AuxDraws::default())
            }
            None => {
                let hp = &self.hp;
                let l0 = gamma(hp.lambda_prior.shape, hp.lambda_prior.rate, rng);
                let a0 = gamma(hp.alpha_prior.shape, hp.alpha_prior.rate, rng);
                let (lambda, phi) = sample_lambda(l0, 1, 1, hp.lambda_prior, rng);
                let (alpha, g, h) = sample_alpha(a0, &[1], 1, hp.alpha_prior, rng);
                let beta = sample_beta_given_m(&[1], lambda, rng);
                let ts = TransitionState {
                    counts: vec![vec![1]],
                    beta,
                    alpha,
                    lambda,
                };
                let state = prior.draw_state(rng);
                let fresh = prior.draw_state(rng);
                let aux = AuxDraws {
                    m: vec![vec![1]],
                    phi,
                    g,
                    h,
                    ..AuxDraws::default()
                };
                (ts, state, fresh, aux)
            }
        };
        self.absorb(&mut state, &first.x, first.y, &mut aux, rng)?;
        let p = Particle {
            s: 0,
            transition,
            states: vec![state],
            fresh,
            aux,
        };
        debug_assert_eq!(p.check_invariants(true), Ok(()));
        Ok(p)
    }

    /// Absorbs `(x, y)` into `state`: draws `U, z`, updates the statistics
    /// and, unless frozen, redraws Γ from its posterior.
    fn absorb(
        &self,
        state: &mut StateParams,
        x: &[f64],
        y: bool,
        aux: &mut AuxDraws,
        rng: &mut StreamRng,
    ) -> Result<()> {
        let v = dot(&state.gamma, x);
        let (u, du, eu) = fsf::sample_utility(v, y, rng);
        let z = fsf::sample_component(u, v, rng)?;
        state.stats.update(x, u, z);
        if self.config.frozen.is_none() {
            state.gamma = posterior_gamma(&state.stats, &state.lambda)?.sample(rng);
        }
        aux.u = u;
        aux.z = z;
        aux.d = du;
        aux.e = eu;
        Ok(())
    }

    /// Log weights of moving to each existing state and to a new state,
    /// including the predictive of `obs`.
    fn candidate_log_weights(&self, p: &Particle, obs: &ObservationRecord, rng: &mut StreamRng) -> Result<Vec<f64>> {
        let probs = p.transition.transition_probs(p.s)?;
        let l = p.num_states();
        let mut out = Vec::with_capacity(l + 1);
        for (k, pk) in probs.iter().enumerate() {
            if *pk <= 0.0 {
                out.push(f64::NEG_INFINITY);
                continue;
            }
            let gamma = if k < l { &p.states[k].gamma } else { &p.fresh.gamma };
            let v = dot(gamma, &obs.x);
            let lik = match self.config.weighting {
                Weighting::ExactLogistic => log_logistic_lik(v, obs.y),
                Weighting::ConditionalNormal => {
                    let (u, _, _) = fsf::sample_utility(v, obs.y, rng);
                    let z = fsf::sample_component(u, v, rng)?;
                    fsf::conditional_log_density(u, v, z)
                }
            };
            out.push(pk.ln() + lik);
        }
        Ok(out)
    }

    /// Advances the cloud by one observation; returns the step diagnostics.
    pub fn step(&mut self, cloud: &mut ParticleCloud, obs: &ObservationRecord) -> Result<StepDiagnostics> {
        if obs.user_id != cloud.user_id {
            return Err(Error::Data(format!(
                "observation for {} routed to cloud of {}",
                obs.user_id, cloud.user_id
            )));
        }
        if obs.t != cloud.t + 1 {
            return Err(Error::Sequencing {
                user: cloud.user_id.clone(),
                expected: cloud.t + 1,
                got: obs.t,
            });
        }
        self.check_obs(obs)?;
        let t = obs.t;
        let tag = cloud.user_tag;
        let seed = self.hp.seed;
        let b = cloud.particles.len();

        let log_q: Vec<Vec<f64>> = cloud
            .particles
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = stream(seed, &[tag, t, purpose::WEIGHT, i as u64]);
                self.candidate_log_weights(p, obs, &mut rng)
            })
            .collect::<Result<_>>()?;
        let mut log_g: Vec<f64> = log_q
            .iter()
            .zip(&cloud.weights)
            .map(|(q, w)| log_sum_exp(q) + w.ln())
            .collect();
        let log_predictive = log_sum_exp(&log_g);
        if !log_predictive.is_finite() {
            let finite = log_g.iter().filter(|v| v.is_finite()).count();
            return Err(Error::DegenerateCloud {
                user: cloud.user_id.clone(),
                t,
                detail: format!("log normalizer {log_predictive}; {finite} of {b} particle weights finite"),
            });
        }
        for g in log_g.iter_mut() {
            *g = (*g - log_predictive).exp();
        }
        let w = log_g;
        let ess = 1.0 / w.iter().map(|x| x * x).sum::<f64>();

        let mut rng = stream(seed, &[tag, t, purpose::RESAMPLE]);
        let idx = match self.config.resampling {
            Resampling::Multinomial => multinomial_indices(&w, b, &mut rng),
            Resampling::Systematic => systematic_indices(&w, b, &mut rng),
        };

        // Hand each parent to its last child without cloning.
        let mut remaining = vec![0usize; b];
        for &a in &idx {
            remaining[a] += 1;
        }
        let mut parents: Vec<Option<Particle>> = std::mem::take(&mut cloud.particles).into_iter().map(Some).collect();
        let mut children: Vec<(Particle, usize)> = Vec::with_capacity(b);
        for &a in &idx {
            remaining[a] -= 1;
            let p = if remaining[a] == 0 {
                parents[a].take().expect("parent taken once")
            } else {
                parents[a].as_ref().expect("parent present").clone()
            };
            children.push((p, a));
        }
        drop(parents);

        self.cache.ensure(t as usize + 1);
        let prior = &cloud.lambda_prior;
        let this = &*self;
        children
            .par_iter_mut()
            .enumerate()
            .map(|(i, (p, a))| {
                let mut rng = stream(seed, &[tag, t, purpose::PROPAGATE, i as u64]);
                this.propagate(p, &log_q[*a], obs, prior, &mut rng)
            })
            .collect::<Result<Vec<()>>>()?;

        cloud.particles = children.into_iter().map(|(p, _)| p).collect();
        cloud.weights = vec![1.0 / b as f64; b];
        cloud.t = t;
        if let Some(snaps) = cloud.snapshots.as_mut() {
            snaps.push(snapshot(t, &cloud.particles)?);
        }
        Ok(StepDiagnostics {
            t,
            log_predictive,
            ess,
            l_histogram: cloud.l_histogram(),
        })
    }

    fn propagate(
        &self,
        p: &mut Particle,
        log_q: &[f64],
        obs: &ObservationRecord,
        prior: &LambdaPrior,
        rng: &mut StreamRng,
    ) -> Result<()> {
        let l = p.num_states();
        let next = sample_log_categorical(log_q, rng);
        if next == l {
            self.open_state(p, prior, rng);
        }
        p.transition.counts[p.s][next] += 1;
        p.s = next;
        let mut aux = std::mem::take(&mut p.aux);
        self.absorb(&mut p.states[next], &obs.x, obs.y, &mut aux, rng)?;
        if self.config.frozen.is_none() {
            let draws = refresh_structure(
                &mut p.transition,
                self.hp.lambda_prior,
                self.hp.alpha_prior,
                &self.cache,
                rng,
            );
            aux.m = draws.m;
            aux.phi = draws.phi;
            aux.g = draws.g;
            aux.h = draws.h;
            p.fresh = prior.draw_state(rng);
        }
        p.aux = aux;
        debug_assert_eq!(p.check_invariants(true), Ok(()));
        Ok(())
    }

    fn open_state(&self, p: &mut Particle, prior: &LambdaPrior, rng: &mut StreamRng) {
        let l = p.num_states();
        let d = self.hp.emission_dim();
        match &self.config.frozen {
            Some(fz) => {
                let beta = &mut p.transition.beta;
                beta[l] = fz.beta[l];
                beta.push(fz.tail(l + 1));
                let fresh = std::mem::replace(&mut p.fresh, frozen_state(fz, l + 1, d));
                p.states.push(fresh);
            }
            None => {
                grow_beta(&mut p.transition.beta, p.transition.lambda, rng);
                let fresh = std::mem::replace(&mut p.fresh, prior.draw_state(rng));
                p.states.push(fresh);
            }
        }
        p.transition.add_state();
    }
}

fn frozen_state(fz: &FrozenParams, k: usize, d: usize) -> StateParams {
    let gamma = fz.gammas.get(k).cloned().unwrap_or_else(|| DVector::zeros(d));
    StateParams {
        gamma,
        lambda: DVector::zeros(2 * d),
        cluster: 0,
        stats: SufficientStats::new(d),
    }
}

fn gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    use rand_distr::Distribution;
    rand_distr::Gamma::new(shape, 1.0 / rate)
        .expect("validated gamma prior")
        .sample(rng)
}

pub fn dot(gamma: &DVector<f64>, x: &[f64]) -> f64 {
    gamma.iter().zip(x).map(|(g, x)| g * x).sum()
}

/// Multinomial resampling through sorted uniforms.
pub fn multinomial_indices<R: Rng + ?Sized>(w: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let mut u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    u.sort_by(|a, b| a.partial_cmp(b).expect("uniforms are finite"));
    let total: f64 = w.iter().sum();
    collect_indices(w, total, u.into_iter())
}

pub fn systematic_indices<R: Rng + ?Sized>(w: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let start: f64 = rng.random();
    let total: f64 = w.iter().sum();
    collect_indices(w, total, (0..n).map(move |i| (i as f64 + start) / n as f64))
}

fn collect_indices(w: &[f64], total: f64, sorted_u: impl Iterator<Item = f64>) -> Vec<usize> {
    let last = w.iter().rposition(|&x| x > 0.0).unwrap_or(w.len() - 1);
    let mut out = Vec::new();
    let mut j = 0;
    let mut cum = w[0] / total;
    for u in sorted_u {
        while u >= cum && j < last {
            j += 1;
            cum += w[j] / total;
        }
        out.push(j);
    }
    out
}

/// Result of filtering one user's stream.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub cloud: ParticleCloud,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl FilterRun {
    pub fn total_log_predictive(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.log_predictive).sum()
    }
}

/// Filters a single user's time-ordered observations.
pub fn filter_stream(
    obs: &[ObservationRecord],
    hp: &HyperParams,
    config: &FilterConfig,
    lambda_prior: Option<LambdaPrior>,
) -> Result<FilterRun> {
    let first = obs
        .first()
        .ok_or_else(|| Error::Data("empty observation stream".into()))?;
    let mut pf = ParticleFilter::new(hp.clone(), config.clone())?;
    let prior = lambda_prior.unwrap_or_else(|| LambdaPrior::baseline(hp, &DVector::zeros(2 * hp.emission_dim())));
    let mut cloud = pf.init_cloud(first, prior)?;
    let mut diagnostics = Vec::with_capacity(obs.len().saturating_sub(1));
    for o in &obs[1..] {
        diagnostics.push(pf.step(&mut cloud, o)?);
    }
    Ok(FilterRun { cloud, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(t: u64, y: bool) -> ObservationRecord {
        ObservationRecord {
            user_id: "u".into(),
            t,
            y,
            x: vec![1.0],
        }
    }

    fn hp(b: usize) -> HyperParams {
        let mut hp = HyperParams::for_dim(1, 0);
        hp.particles = b;
        hp.seed = 3;
        hp
    }

    #[test]
    fn init_has_one_state_and_uniform_weights() {
        let h = hp(64);
        let pf = ParticleFilter::new(h.clone(), FilterConfig::default()).unwrap();
        let cloud = pf
            .init_cloud(&obs(1, true), LambdaPrior::baseline(&h, &DVector::zeros(2)))
            .unwrap();
        assert!(cloud.particles.iter().all(|p| p.num_states() == 1 && p.s == 0));
        assert!(cloud.particles.iter().all(|p| p.transition.counts == vec![vec![1]]));
        assert!(cloud.weights.iter().all(|w| *w == 1.0 / 64.0));
    }

    #[test]
    fn point_mass_prior_fixes_lambda() {
        let mut h = hp(16);
        h.lambda_cov = DMatrix::zeros(2, 2);
        let pf = ParticleFilter::new(h.clone(), FilterConfig::default()).unwrap();
        let cloud = pf
            .init_cloud(&obs(1, false), LambdaPrior::baseline(&h, &DVector::zeros(2)))
            .unwrap();
        for p in &cloud.particles {
            assert_eq!(p.states[0].lambda, h.lambda_mean);
        }
    }

    #[test]
    fn single_state_collapse_counts_up() {
        let mut h = hp(1);
        h.seed = 9;
        let cfg = FilterConfig {
            frozen: Some(FrozenParams {
                alpha: 1e-12,
                beta: vec![1.0],
                gammas: vec![DVector::from_vec(vec![0.4])],
            }),
            ..FilterConfig::default()
        };
        let stream: Vec<_> = (1..=30).map(|t| obs(t, t % 3 == 0)).collect();
        let run = filter_stream(&stream, &h, &cfg, None).unwrap();
        let p = &run.cloud.particles[0];
        assert_eq!(p.num_states(), 1);
        assert_eq!(p.transition.counts[0][0], 30);
    }

    #[test]
    fn sequencing_and_dimension_errors() {
        let h = hp(8);
        let mut pf = ParticleFilter::new(h.clone(), FilterConfig::default()).unwrap();
        let mut cloud = pf
            .init_cloud(&obs(1, true), LambdaPrior::baseline(&h, &DVector::zeros(2)))
            .unwrap();
        assert!(matches!(
            pf.step(&mut cloud, &obs(3, true)),
            Err(Error::Sequencing { expected: 2, got: 3, .. })
        ));
        let mut bad = obs(2, true);
        bad.x = vec![1.0, 2.0];
        assert!(matches!(pf.step(&mut cloud, &bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn reproducible_for_fixed_seed() {
        let h = hp(50);
        let stream: Vec<_> = (1..=40).map(|t| obs(t, (t / 5) % 2 == 0)).collect();
        let a = filter_stream(&stream, &h, &FilterConfig::default(), None).unwrap();
        let b = filter_stream(&stream, &h, &FilterConfig::default(), None).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.diagnostics, b.diagnostics);
    }

    #[test]
    fn invariants_hold_along_a_run() {
        let h = hp(40);
        let stream: Vec<_> = (1..=60).map(|t| obs(t, (t / 10) % 2 == 0)).collect();
        let run = filter_stream(&stream, &h, &FilterConfig::default(), None).unwrap();
        for p in &run.cloud.particles {
            p.check_invariants(true).unwrap();
            // one phantom plus one transition per step
            assert_eq!(p.transition.total(), 60);
        }
        for w in run.diagnostics.windows(2) {
            let max_l = |d: &StepDiagnostics| d.l_histogram.len();
            assert!(max_l(&w[1]) <= max_l(&w[0]) + 1);
        }
        assert!(run.diagnostics.iter().all(|d| d.log_predictive.is_finite() && d.ess >= 1.0 - 1e-9));
    }

    #[test]
    fn conditional_normal_mode_runs() {
        let h = hp(30);
        let cfg = FilterConfig {
            weighting: Weighting::ConditionalNormal,
            ..FilterConfig::default()
        };
        let stream: Vec<_> = (1..=20).map(|t| obs(t, t % 2 == 0)).collect();
        let run = filter_stream(&stream, &h, &cfg, None).unwrap();
        assert_eq!(run.diagnostics.len(), 19);
    }

    #[test]
    fn resamplers_preserve_count_and_respect_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = [0.0, 0.5, 0.0, 0.5, 0.0];
        for idx in [multinomial_indices(&w, 1000, &mut rng), systematic_indices(&w, 1000, &mut rng)] {
            assert_eq!(idx.len(), 1000);
            assert!(idx.iter().all(|&i| i == 1 || i == 3));
        }
        let sys = systematic_indices(&w, 1000, &mut rng);
        assert_eq!(sys.iter().filter(|&&i| i == 1).count(), 500);
    }

    #[test]
    fn single_observation_stream_is_init() {
        let h = hp(10);
        let run = filter_stream(&[obs(1, true)], &h, &FilterConfig::default(), None).unwrap();
        assert!(run.diagnostics.is_empty());
        assert_eq!(run.cloud.t, 1);
    }
}
