//! Domain types shared by the inference modules: covariate layout,
//! observation records, hyperparameters and the particle representation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conjugate::SufficientStats;
use crate::error::{Error, Result};
use crate::linalg::is_symmetric;
use crate::transition::TransitionState;

/// Number of badge categories (gold, silver, bronze).
pub const BADGE_KINDS: usize = 3;

/// Fixed packing of the utility covariates into `x`.
///
/// Slot order: `intercept, day, cont, rcv, crep, rep, rnk, drnk, bdg[3],
/// tag[n_tags], cbdg[3], ctag[n_tags]`. The first two slots carry the
/// individual and day effects so that the emission stays a single linear
/// form `Γ·x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateLayout {
    pub n_tags: usize,
    /// Centering applied to `cont` before scaling by 1/100.
    pub cont_center: f64,
    /// Centering applied to `rcv` before scaling by 1/100.
    pub rcv_center: f64,
}

pub const SLOT_INTERCEPT: usize = 0;
pub const SLOT_DAY: usize = 1;
pub const SLOT_CONT: usize = 2;
pub const SLOT_RCV: usize = 3;
pub const SLOT_CREP: usize = 4;
pub const SLOT_REP: usize = 5;
pub const SLOT_RNK: usize = 6;
pub const SLOT_DRNK: usize = 7;
pub const SLOT_BDG: usize = 8;

const COUNT_SCALE: f64 = 100.0;

impl CovariateLayout {
    pub fn new(n_tags: usize) -> Self {
        Self {
            n_tags,
            cont_center: 0.0,
            rcv_center: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        2 + 6 + BADGE_KINDS + self.n_tags + BADGE_KINDS + self.n_tags
    }

    pub fn tag_offset(&self) -> usize {
        SLOT_BDG + BADGE_KINDS
    }

    pub fn cbdg_offset(&self) -> usize {
        self.tag_offset() + self.n_tags
    }

    pub fn ctag_offset(&self) -> usize {
        self.cbdg_offset() + BADGE_KINDS
    }

    pub fn pack(&self, f: &RawFields) -> Result<Vec<f64>> {
        if f.tag.len() != self.n_tags {
            return Err(Error::Dimension {
                what: "tag",
                expected: self.n_tags,
                got: f.tag.len(),
            });
        }
        if f.ctag.len() != self.n_tags {
            return Err(Error::Dimension {
                what: "ctag",
                expected: self.n_tags,
                got: f.ctag.len(),
            });
        }
        let mut x = Vec::with_capacity(self.dim());
        x.push(f.user_effect);
        x.push(f.day);
        x.push((f.cont - self.cont_center) / COUNT_SCALE);
        x.push((f.rcv - self.rcv_center) / COUNT_SCALE);
        x.extend_from_slice(&[f.crep, f.rep, f.rnk, f.drnk]);
        x.extend_from_slice(&f.bdg);
        x.extend_from_slice(&f.tag);
        x.extend_from_slice(&f.cbdg);
        x.extend_from_slice(&f.ctag);
        debug_assert_eq!(x.len(), self.dim());
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite covariate".into()));
        }
        Ok(x)
    }

    pub fn unpack(&self, x: &[f64]) -> Result<RawFields> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                what: "covariate vector",
                expected: self.dim(),
                got: x.len(),
            });
        }
        let tag = self.tag_offset();
        let cbdg = self.cbdg_offset();
        let ctag = self.ctag_offset();
        Ok(RawFields {
            user_effect: x[SLOT_INTERCEPT],
            day: x[SLOT_DAY],
            cont: x[SLOT_CONT] * COUNT_SCALE + self.cont_center,
            rcv: x[SLOT_RCV] * COUNT_SCALE + self.rcv_center,
            crep: x[SLOT_CREP],
            rep: x[SLOT_REP],
            rnk: x[SLOT_RNK],
            drnk: x[SLOT_DRNK],
            bdg: [x[SLOT_BDG], x[SLOT_BDG + 1], x[SLOT_BDG + 2]],
            tag: x[tag..tag + self.n_tags].to_vec(),
            cbdg: [x[cbdg], x[cbdg + 1], x[cbdg + 2]],
            ctag: x[ctag..ctag + self.n_tags].to_vec(),
        })
    }
}

/// Per-event raw covariate fields, before packing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFields {
    /// Value multiplying the individual effect; 1 for ordinary events.
    pub user_effect: f64,
    /// Value multiplying the day effect.
    pub day: f64,
    pub cont: f64,
    pub rcv: f64,
    pub crep: f64,
    pub rep: f64,
    pub rnk: f64,
    pub drnk: f64,
    pub bdg: [f64; BADGE_KINDS],
    pub tag: Vec<f64>,
    pub cbdg: [f64; BADGE_KINDS],
    pub ctag: Vec<f64>,
}

impl RawFields {
    /// All fields zero, including the intercept indicator.
    pub fn zeros(n_tags: usize) -> Self {
        Self {
            user_effect: 0.0,
            day: 0.0,
            cont: 0.0,
            rcv: 0.0,
            crep: 0.0,
            rep: 0.0,
            rnk: 0.0,
            drnk: 0.0,
            bdg: [0.0; BADGE_KINDS],
            tag: vec![0.0; n_tags],
            cbdg: [0.0; BADGE_KINDS],
            ctag: vec![0.0; n_tags],
        }
    }

    /// Zero covariates with the intercept indicator switched on.
    pub fn baseline(n_tags: usize) -> Self {
        Self {
            user_effect: 1.0,
            ..Self::zeros(n_tags)
        }
    }
}

/// One user-time event: binary choice plus packed covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub user_id: String,
    pub t: u64,
    pub y: bool,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    /// Rate parameter (inverse scale).
    pub rate: f64,
}

impl GammaPrior {
    pub fn new(shape: f64, rate: f64) -> Self {
        Self { shape, rate }
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }
}

/// Hyperparameters of the whole model plus the engine sizing knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Prior on the stick-breaking parameter λ of the transition base measure.
    pub lambda_prior: GammaPrior,
    /// Prior on the transition concentration α.
    pub alpha_prior: GammaPrior,
    /// Prior on the population DP concentration.
    pub concentration_prior: GammaPrior,
    /// Baseline mean of Λ (length 2d: d means then d log-variances).
    pub lambda_mean: DVector<f64>,
    /// Baseline covariance of Λ (2d × 2d).
    pub lambda_cov: DMatrix<f64>,
    /// Normal–Wishart mean precision scaling for the population clusters.
    pub mean_precision: f64,
    /// Wishart degrees of freedom for the cluster precision prior.
    pub wishart_dof: f64,
    /// Wishart scale (the `B` with `E[precision] = dof · B⁻¹`).
    pub wishart_scale: DMatrix<f64>,
    /// Prior mean of the demographics loading Δ (2d × d_D).
    pub delta_mean: DMatrix<f64>,
    /// Prior variance of every Δ entry.
    pub delta_var: f64,
    pub particles: usize,
    pub k_trunc: usize,
    pub seed: u64,
}

impl HyperParams {
    /// Weakly informative defaults for emission dimension `d` and `d_demo` demographics.
    pub fn for_dim(d: usize, d_demo: usize) -> Self {
        let p = 2 * d;
        let mut lambda_mean = DVector::zeros(p);
        for i in d..p {
            lambda_mean[i] = 2f64.ln();
        }
        let mut lambda_cov = DMatrix::zeros(p, p);
        for i in 0..p {
            lambda_cov[(i, i)] = if i < d { 0.5 } else { 0.1 };
        }
        let wishart_dof = p as f64 + 2.0;
        Self {
            lambda_prior: GammaPrior::new(1.0, 1.0),
            alpha_prior: GammaPrior::new(1.0, 1.0),
            concentration_prior: GammaPrior::new(1.0, 1.0),
            lambda_mean,
            wishart_scale: &lambda_cov * wishart_dof,
            lambda_cov,
            mean_precision: 0.1,
            wishart_dof,
            delta_mean: DMatrix::zeros(p, d_demo),
            delta_var: 1.0,
            particles: 500,
            k_trunc: 30,
            seed: 0,
        }
    }

    /// Emission dimension `d`.
    pub fn emission_dim(&self) -> usize {
        self.lambda_mean.len() / 2
    }

    pub fn demographics_dim(&self) -> usize {
        self.delta_mean.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        for (name, g) in [
            ("lambda_prior", self.lambda_prior),
            ("alpha_prior", self.alpha_prior),
            ("concentration_prior", self.concentration_prior),
        ] {
            if !(g.shape > 0.0 && g.rate > 0.0 && g.shape.is_finite() && g.rate.is_finite()) {
                return cfg(format!("{name} needs positive finite shape and rate"));
            }
        }
        let p = self.lambda_mean.len();
        if p == 0 || p % 2 != 0 {
            return cfg(format!("lambda_mean must have even positive length, got {p}"));
        }
        if self.lambda_cov.shape() != (p, p) || self.wishart_scale.shape() != (p, p) {
            return cfg("lambda_cov and wishart_scale must be 2d × 2d".into());
        }
        if !is_symmetric(&self.lambda_cov, 1e-12) {
            return cfg("lambda_cov must be symmetric".into());
        }
        let min_eig = self.lambda_cov.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-12 * self.lambda_cov.amax().max(1.0) {
            return cfg("lambda_cov must be positive semidefinite".into());
        }
        if !is_symmetric(&self.wishart_scale, 1e-12) || self.wishart_scale.clone().cholesky().is_none() {
            return cfg("wishart_scale must be symmetric positive definite".into());
        }
        if self.wishart_dof <= p as f64 - 1.0 {
            return cfg(format!(
                "wishart_dof {} must exceed dimension minus one ({})",
                self.wishart_dof,
                p - 1
            ));
        }
        if !(self.mean_precision > 0.0) {
            return cfg("mean_precision must be positive".into());
        }
        if self.delta_mean.nrows() != p {
            return cfg("delta_mean must have 2d rows".into());
        }
        if !(self.delta_var >= 0.0) {
            return cfg("delta_var must be nonnegative".into());
        }
        if self.particles == 0 {
            return cfg("particle count must be at least 1".into());
        }
        if self.k_trunc == 0 {
            return cfg("k_trunc must be at least 1".into());
        }
        Ok(())
    }
}

/// Per-state structural block of a particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateParams {
    /// Emission coefficients Γ (length d).
    pub gamma: DVector<f64>,
    /// Prior for Γ: d means followed by d log-variances.
    pub lambda: DVector<f64>,
    /// Population cluster index.
    pub cluster: usize,
    pub stats: SufficientStats,
}

/// Latest auxiliary draws, kept for inspection and checkpoint fidelity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxDraws {
    pub m: Vec<Vec<u32>>,
    pub phi: f64,
    pub g: Vec<f64>,
    pub h: Vec<bool>,
    pub u: f64,
    pub z: usize,
    pub d: f64,
    pub e: f64,
}

/// One particle: current state, transition block, per-state parameters and
/// the prospective parameters for a state not yet visited.
///
/// State indices are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub s: usize,
    pub transition: TransitionState,
    pub states: Vec<StateParams>,
    pub fresh: StateParams,
    pub aux: AuxDraws,
}

impl Particle {
    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// Checks the structural invariants. `track_visits` additionally checks
    /// that the transitions into each state match its sufficient-statistics
    /// visit count.
    pub fn check_invariants(&self, track_visits: bool) -> std::result::Result<(), String> {
        let l = self.states.len();
        let tr = &self.transition;
        if tr.counts.len() != l || tr.counts.iter().any(|r| r.len() != l) {
            return Err(format!("count matrix is not {l}×{l}"));
        }
        if tr.beta.len() != l + 1 {
            return Err(format!("beta has length {}, expected {}", tr.beta.len(), l + 1));
        }
        let sum: f64 = tr.beta.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || tr.beta.iter().any(|b| !(*b >= 0.0)) {
            return Err(format!("beta is not a probability vector (sum {sum})"));
        }
        if self.s >= l {
            return Err(format!("current state {} out of range {l}", self.s));
        }
        if !(tr.alpha > 0.0 && tr.lambda > 0.0) {
            return Err("alpha and lambda must be positive".into());
        }
        if track_visits {
            for j in 0..l {
                let into: u64 = tr.counts.iter().map(|r| r[j] as u64).sum();
                if into != self.states[j].stats.n {
                    return Err(format!(
                        "state {j}: {into} transitions in but {} absorbed points",
                        self.states[j].stats.n
                    ));
                }
            }
        }
        Ok(())
    }
}
