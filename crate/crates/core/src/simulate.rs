//! Synthetic event streams from finite-state versions of the model, with
//! the ground truth kept alongside.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::sample_categorical;
use crate::hierarchy::Demographics;
use crate::io::{Covariates, EventRecord};
use crate::linalg::sample_mvn;
use crate::model::{CovariateLayout, RawFields, BADGE_KINDS};
use crate::rng::{purpose, stream, user_tag};
use crate::special::logistic;

pub const WEEK: u64 = 7;

/// Point economy of the gamified covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamifiedConfig {
    pub n_tags: usize,
    /// Reputation points per badge of each kind.
    pub badge_thresholds: [f64; BADGE_KINDS],
    pub points_per_contribution: f64,
    pub points_per_receipt: f64,
    /// Mean receipts per tick once the user has contributed at least once.
    pub receipt_rate: f64,
}

impl Default for GamifiedConfig {
    fn default() -> Self {
        Self {
            n_tags: 2,
            badge_thresholds: [200.0, 50.0, 10.0],
            points_per_contribution: 2.0,
            points_per_receipt: 1.0,
            receipt_rate: 0.5,
        }
    }
}

impl GamifiedConfig {
    pub fn layout(&self) -> CovariateLayout {
        CovariateLayout::new(self.n_tags)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovariateSource {
    /// `x = [1]`.
    Intercept,
    Gamified(GamifiedConfig),
}

impl CovariateSource {
    pub fn dim(&self) -> usize {
        match self {
            CovariateSource::Intercept => 1,
            CovariateSource::Gamified(c) => c.layout().dim(),
        }
    }

    pub fn layout(&self) -> Option<CovariateLayout> {
        match self {
            CovariateSource::Intercept => None,
            CovariateSource::Gamified(c) => Some(c.layout()),
        }
    }
}

/// Running asset counters of one simulated user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetState {
    /// Ticks emitted so far.
    pub t: u64,
    pub cont: f64,
    pub crep: f64,
    pub week_points: f64,
    pub last_week_points: f64,
    pub rnk: f64,
    pub drnk: f64,
    pub cbdg: [f64; BADGE_KINDS],
    pub ctag: Vec<f64>,
}

impl AssetState {
    pub fn new(n_tags: usize) -> Self {
        Self {
            t: 0,
            cont: 0.0,
            crep: 0.0,
            week_points: 0.0,
            last_week_points: 0.0,
            rnk: 1.0,
            drnk: 0.0,
            cbdg: [0.0; BADGE_KINDS],
            ctag: vec![0.0; n_tags],
        }
    }
}

/// Weekly rank surrogate in (0, 1]; smaller is better.
fn rank_of(points: f64) -> f64 {
    1.0 / (1.0 + points / 10.0)
}

/// Advances the counters by one tick given the previous choice and returns
/// the covariates seen at the new tick.
///
/// Week boundaries fall every 7 ticks: on entering a new week the weekly
/// points move to `rep`, the rank is recomputed and the weekly tally
/// restarts. Badges of kind `k` are held as `floor(crep / threshold_k)`.
pub fn gen_covariates<R: Rng + ?Sized>(
    cfg: &GamifiedConfig,
    state: &mut AssetState,
    y_prev: bool,
    rng: &mut R,
) -> RawFields {
    state.t += 1;
    if state.t > 1 && (state.t - 1) % WEEK == 0 {
        state.last_week_points = state.week_points;
        state.week_points = 0.0;
        let rnk = rank_of(state.last_week_points);
        state.drnk = rnk - state.rnk;
        state.rnk = rnk;
    }
    let mut tag = vec![0.0; cfg.n_tags];
    if y_prev {
        state.cont += 1.0;
        if cfg.n_tags > 0 {
            let j = rng.random_range(0..cfg.n_tags);
            tag[j] = 1.0;
            state.ctag[j] += 1.0;
        }
    }
    let rcv = if state.cont > 0.0 && cfg.receipt_rate > 0.0 {
        Poisson::new(cfg.receipt_rate).expect("positive rate").sample(rng)
    } else {
        0.0
    };
    let points = cfg.points_per_contribution * f64::from(u8::from(y_prev)) + cfg.points_per_receipt * rcv;
    state.crep += points;
    state.week_points += points;
    let mut bdg = [0.0; BADGE_KINDS];
    for k in 0..BADGE_KINDS {
        let held = (state.crep / cfg.badge_thresholds[k]).floor();
        bdg[k] = held - state.cbdg[k];
        state.cbdg[k] = held;
    }
    let weekend = (state.t - 1) % WEEK >= 5;
    RawFields {
        user_effect: 1.0,
        day: f64::from(u8::from(weekend)),
        cont: state.cont,
        rcv,
        crep: state.crep / 100.0,
        rep: state.last_week_points / 100.0,
        rnk: state.rnk,
        drnk: state.drnk,
        bdg,
        tag,
        cbdg: state.cbdg,
        ctag: state.ctag.clone(),
    }
}

/// Finite-state emission and transition law of one simulated user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmSpec {
    pub gammas: Vec<DVector<f64>>,
    pub transition: DMatrix<f64>,
    pub initial: Vec<f64>,
}

impl HmmSpec {
    pub fn validate(&self, d: usize) -> Result<()> {
        let k = self.gammas.len();
        if k == 0 {
            return Err(Error::Config("need at least one state".into()));
        }
        if self.transition.shape() != (k, k) || self.initial.len() != k {
            return Err(Error::Config("transition matrix and initial law must match the state count".into()));
        }
        let simplex = |row: &[f64]| {
            row.iter().all(|p| *p >= 0.0 && p.is_finite()) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        for r in 0..k {
            let row: Vec<f64> = self.transition.row(r).iter().copied().collect();
            if !simplex(&row) {
                return Err(Error::Config(format!("transition row {r} is not on the simplex")));
            }
        }
        if !simplex(&self.initial) {
            return Err(Error::Config("initial law is not on the simplex".into()));
        }
        if self.gammas.iter().any(|g| g.len() != d || g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config(format!("every Γ must be finite with length {d}")));
        }
        Ok(())
    }

    /// `k` states with self-transition `stay` and uniform moves otherwise.
    pub fn sticky(gammas: Vec<DVector<f64>>, stay: f64) -> Self {
        let k = gammas.len();
        let off = if k > 1 { (1.0 - stay) / (k - 1) as f64 } else { 0.0 };
        let transition = DMatrix::from_fn(k, k, |i, j| if k == 1 { 1.0 } else if i == j { stay } else { off });
        Self {
            gammas,
            transition,
            initial: vec![1.0 / k as f64; k],
        }
    }
}

/// A simulated stream and its hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct SimStream {
    pub events: Vec<EventRecord>,
    pub states: Vec<usize>,
}

/// Simulates `t_len` events for one user.
pub fn gen_hmm_stream<R: Rng + ?Sized>(
    spec: &HmmSpec,
    t_len: u64,
    source: &CovariateSource,
    user_id: &str,
    rng: &mut R,
) -> Result<SimStream> {
    spec.validate(source.dim())?;
    let mut assets = match source {
        CovariateSource::Gamified(c) => Some((c, AssetState::new(c.n_tags))),
        CovariateSource::Intercept => None,
    };
    let layout = source.layout();
    let mut events = Vec::with_capacity(t_len as usize);
    let mut states = Vec::with_capacity(t_len as usize);
    let mut s = 0;
    let mut y_prev = false;
    for t in 1..=t_len {
        let covariates = match assets.as_mut() {
            Some((cfg, st)) => Covariates::Named(gen_covariates(cfg, st, y_prev, rng)),
            None => Covariates::Packed(vec![1.0]),
        };
        s = if t == 1 {
            sample_categorical(&spec.initial, rng)
        } else {
            let row: Vec<f64> = spec.transition.row(s).iter().copied().collect();
            sample_categorical(&row, rng)
        };
        let x = match (&covariates, &layout) {
            (Covariates::Named(f), Some(l)) => l.pack(f)?,
            (Covariates::Packed(x), _) => x.clone(),
            (Covariates::Named(_), None) => unreachable!("named covariates come with a layout"),
        };
        let v: f64 = spec.gammas[s].iter().zip(&x).map(|(g, x)| g * x).sum();
        let y = rng.random::<f64>() < logistic(v);
        events.push(EventRecord {
            user_id: user_id.to_string(),
            t,
            y,
            covariates,
        });
        states.push(s);
        y_prev = y;
    }
    Ok(SimStream { events, states })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DemographicsSpec {
    /// Independent Bernoulli entries with the given success probabilities.
    Binary(Vec<f64>),
    /// Independent standard normal entries.
    Gaussian(usize),
}

impl DemographicsSpec {
    pub fn dim(&self) -> usize {
        match self {
            DemographicsSpec::Binary(p) => p.len(),
            DemographicsSpec::Gaussian(n) => *n,
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            DemographicsSpec::Binary(p) => {
                DVector::from_iterator(p.len(), p.iter().map(|pi| f64::from(u8::from(rng.random::<f64>() < *pi))))
            }
            DemographicsSpec::Gaussian(n) => DVector::from_fn(*n, |_, _| rng.sample(StandardNormal)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub users: usize,
    pub t_len: u64,
    pub states_per_user: usize,
    pub self_transition: f64,
    pub segments: Vec<Segment>,
    /// Loading of Γ on demographics (d × d_D).
    pub delta: DMatrix<f64>,
    pub demographics: DemographicsSpec,
    pub source: CovariateSource,
}

/// Ground truth of one simulated user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: String,
    pub segment: usize,
    pub demographics: Vec<f64>,
    pub gammas: Vec<Vec<f64>>,
    pub states: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Events ordered by `(t, user_id)`.
    pub events: Vec<EventRecord>,
    pub demographics: Vec<Demographics>,
    pub truth: Vec<UserTruth>,
    pub layout: Option<CovariateLayout>,
}

pub fn user_name(i: usize) -> String {
    format!("u{i:04}")
}

/// Simulates a population: each user draws demographics `D`, a segment `c`
/// and per-state `Γ ~ N(ΔD + μ_c, Σ_c)`, then a sticky stream.
pub fn gen_population(spec: &PopulationSpec, seed: u64) -> Result<Dataset> {
    let d = spec.source.dim();
    if spec.segments.is_empty() {
        return Err(Error::Config("need at least one segment".into()));
    }
    let weights: Vec<f64> = spec.segments.iter().map(|s| s.weight).collect();
    if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config("segment weights must lie on the simplex".into()));
    }
    if spec.delta.shape() != (d, spec.demographics.dim()) {
        return Err(Error::Config(format!(
            "delta must be {d} × {}, got {:?}",
            spec.demographics.dim(),
            spec.delta.shape()
        )));
    }
    if spec.segments.iter().any(|s| s.mean.len() != d || s.cov.shape() != (d, d)) {
        return Err(Error::Config(format!("segment parameters must have dimension {d}")));
    }
    if spec.states_per_user == 0 || !(0.0..=1.0).contains(&spec.self_transition) {
        return Err(Error::Config("need ≥ 1 state per user and a self-transition in [0, 1]".into()));
    }
    let per_user: Vec<(SimStream, UserTruth, Demographics)> = (0..spec.users)
        .into_par_iter()
        .map(|i| {
            let user_id = user_name(i);
            let mut rng = stream(seed, &[user_tag(&user_id), purpose::SIMULATE]);
            let demo = spec.demographics.draw(&mut rng);
            let c = sample_categorical(&weights, &mut rng);
            let seg = &spec.segments[c];
            let centre = &spec.delta * &demo + &seg.mean;
            let gammas: Vec<DVector<f64>> = (0..spec.states_per_user)
                .map(|_| sample_mvn(&centre, &seg.cov, &mut rng))
                .collect();
            let hmm = HmmSpec::sticky(gammas.clone(), spec.self_transition);
            let sim = gen_hmm_stream(&hmm, spec.t_len, &spec.source, &user_id, &mut rng)?;
            let truth = UserTruth {
                user_id: user_id.clone(),
                segment: c,
                demographics: demo.iter().copied().collect(),
                gammas: gammas.iter().map(|g| g.iter().copied().collect()).collect(),
                states: sim.states.clone(),
            };
            let dem = Demographics {
                user_id,
                d: truth.demographics.clone(),
            };
            Ok((sim, truth, dem))
        })
        .collect::<Result<_>>()?;
    let mut events = Vec::with_capacity(spec.users * spec.t_len as usize);
    let mut truth = Vec::with_capacity(spec.users);
    let mut demographics = Vec::with_capacity(spec.users);
    for (sim, tr, dem) in per_user {
        events.extend(sim.events);
        truth.push(tr);
        demographics.push(dem);
    }
    events.sort_by(|a, b| a.t.cmp(&b.t).then_with(|| a.user_id.cmp(&b.user_id)));
    Ok(Dataset {
        events,
        demographics,
        truth,
        layout: spec.source.layout(),
    })
}

/// Default per-state Γ for gamified streams: the intercept carries the state
/// contrast and a few covariates get small loadings so `|Γ·x|` stays moderate.
pub fn gamified_gammas(cfg: &GamifiedConfig, intercepts: &[f64]) -> Vec<DVector<f64>> {
    let layout = cfg.layout();
    intercepts
        .iter()
        .map(|&a| {
            let mut g = DVector::zeros(layout.dim());
            g[crate::model::SLOT_INTERCEPT] = a;
            g[crate::model::SLOT_DAY] = -0.2;
            g[crate::model::SLOT_CONT] = 0.5;
            g[crate::model::SLOT_REP] = 0.3;
            for k in 0..BADGE_KINDS {
                g[crate::model::SLOT_BDG + k] = 0.2;
            }
            g
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn intercepts(v: &[f64]) -> Vec<DVector<f64>> {
        v.iter().map(|a| DVector::from_vec(vec![*a])).collect()
    }

    #[test]
    fn fair_coin() {
        let spec = HmmSpec::sticky(intercepts(&[0.0]), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sim = gen_hmm_stream(&spec, 10_000, &CovariateSource::Intercept, "u", &mut rng).unwrap();
        let mean = sim.events.iter().filter(|e| e.y).count() as f64 / 1e4;
        assert!((mean - 0.5).abs() < 3.0 * (0.25f64 / 1e4).sqrt());
    }

    #[test]
    fn identity_transition_is_absorbing() {
        let mut spec = HmmSpec::sticky(intercepts(&[1.0, -1.0, 0.0]), 1.0);
        spec.initial = vec![0.0, 1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sim = gen_hmm_stream(&spec, 500, &CovariateSource::Intercept, "u", &mut rng).unwrap();
        assert!(sim.states.iter().all(|&s| s == 1));
    }

    #[test]
    fn per_state_rates_match_logistic() {
        let spec = HmmSpec::sticky(intercepts(&[2.0, -2.0]), 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sim = gen_hmm_stream(&spec, 40_000, &CovariateSource::Intercept, "u", &mut rng).unwrap();
        for (k, p) in [(0, 0.880_797_077_977_882_3), (1, 0.119_202_922_022_117_7)] {
            let ys: Vec<bool> = sim.events.iter().zip(&sim.states).filter(|(_, s)| **s == k).map(|(e, _)| e.y).collect();
            let n = ys.len() as f64;
            let rate = ys.iter().filter(|y| **y).count() as f64 / n;
            assert!((rate - p).abs() < 3.0 * (p * (1.0 - p) / n).sqrt(), "state {k}: {rate}");
        }
    }

    #[test]
    fn invalid_rows_rejected() {
        let mut spec = HmmSpec::sticky(intercepts(&[0.0, 1.0]), 0.9);
        spec.transition[(0, 0)] = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            gen_hmm_stream(&spec, 5, &CovariateSource::Intercept, "u", &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn inactive_user_keeps_baseline() {
        let cfg = GamifiedConfig::default();
        let mut st = AssetState::new(cfg.n_tags);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let f = gen_covariates(&cfg, &mut st, false, &mut rng);
            assert_eq!(f.cont, 0.0);
            assert_eq!(f.rcv, 0.0);
            assert_eq!(f.cbdg, [0.0; 3]);
        }
    }

    #[test]
    fn counters_monotone_and_weeks_reset() {
        let cfg = GamifiedConfig::default();
        let hmm = HmmSpec::sticky(gamified_gammas(&cfg, &[1.0, -1.0]), 0.95);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sim = gen_hmm_stream(&hmm, 300, &CovariateSource::Gamified(cfg.clone()), "u", &mut rng).unwrap();
        let fields: Vec<&RawFields> = sim
            .events
            .iter()
            .map(|e| match &e.covariates {
                Covariates::Named(f) => f,
                Covariates::Packed(_) => unreachable!(),
            })
            .collect();
        for w in fields.windows(2) {
            assert!(w[1].cont >= w[0].cont && w[1].crep >= w[0].crep);
            for k in 0..3 {
                assert!(w[1].cbdg[k] >= w[0].cbdg[k]);
            }
        }
        // rep only changes on week boundaries and equals last week's points
        let mut week_points = 0.0;
        let mut prev_crep = 0.0;
        for (i, f) in fields.iter().enumerate() {
            let t = i as u64 + 1;
            if t > 1 && (t - 1) % WEEK == 0 {
                assert!((f.rep - week_points / 100.0).abs() < 1e-12, "t={t}");
                week_points = 0.0;
            } else if t > 1 {
                assert_eq!(f.rep, fields[i - 1].rep);
            }
            week_points += (f.crep - prev_crep) * 100.0;
            prev_crep = f.crep;
        }
        let layout = cfg.layout();
        for (e, s) in sim.events.iter().zip(&sim.states) {
            let x = e.to_observation(&layout).unwrap().x;
            let v: f64 = hmm.gammas[*s].iter().zip(&x).map(|(g, x)| g * x).sum();
            assert!(v.abs() <= 6.0);
        }
    }

    #[test]
    fn badge_granted_at_first_crossing() {
        let cfg = GamifiedConfig {
            n_tags: 0,
            badge_thresholds: [1e9, 1e9, 10.0],
            points_per_contribution: 3.0,
            points_per_receipt: 0.0,
            receipt_rate: 0.0,
        };
        let mut st = AssetState::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ys = [true, false, true, true, false, true, true];
        let mut points: f64 = 0.0;
        let mut first = None;
        for (i, &y) in ys.iter().enumerate() {
            let before = points;
            let f = gen_covariates(&cfg, &mut st, y, &mut rng);
            if y {
                points += 3.0;
            }
            if first.is_none() && points >= 10.0 {
                first = Some(i);
            }
            let crossed = (points / 10.0).floor() > (before / 10.0).floor();
            assert_eq!(f.bdg[2] > 0.0, crossed, "tick {i}");
        }
        assert_eq!(first, Some(5));
    }

    fn population(segments: Vec<Segment>, delta: DMatrix<f64>, demo: DemographicsSpec, users: usize) -> PopulationSpec {
        PopulationSpec {
            users,
            t_len: 5,
            states_per_user: 1,
            self_transition: 1.0,
            segments,
            delta,
            demographics: demo,
            source: CovariateSource::Intercept,
        }
    }

    #[test]
    fn one_segment_no_loading() {
        let seg = Segment {
            weight: 1.0,
            mean: DVector::from_vec(vec![1.5]),
            cov: DMatrix::from_element(1, 1, 0.25),
        };
        let spec = population(vec![seg], DMatrix::zeros(1, 1), DemographicsSpec::Binary(vec![0.5]), 2000);
        let ds = gen_population(&spec, 3).unwrap();
        let g: Vec<f64> = ds.truth.iter().map(|t| t.gammas[0][0]).collect();
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        assert!((mean - 1.5).abs() < 3.0 * (0.25f64 / 2000.0).sqrt());
        assert!(ds.truth.iter().all(|t| t.segment == 0));
    }

    #[test]
    fn separated_segments_are_recoverable() {
        let seg = |w: f64, m: f64| Segment {
            weight: w,
            mean: DVector::from_vec(vec![m]),
            cov: DMatrix::from_element(1, 1, 0.1),
        };
        let spec = population(
            vec![seg(0.4, -4.0), seg(0.6, 4.0)],
            DMatrix::zeros(1, 0),
            DemographicsSpec::Gaussian(0),
            400,
        );
        let ds = gen_population(&spec, 4).unwrap();
        // 2-means on the true Γ
        let g: Vec<f64> = ds.truth.iter().map(|t| t.gammas[0][0]).collect();
        let (mut c0, mut c1) = (g.iter().cloned().fold(f64::INFINITY, f64::min), g.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        let mut assign = vec![0usize; g.len()];
        for _ in 0..20 {
            for (a, v) in assign.iter_mut().zip(&g) {
                *a = usize::from((v - c1).abs() < (v - c0).abs());
            }
            let mean_of = |k| {
                let xs: Vec<f64> = g.iter().zip(&assign).filter(|(_, a)| **a == k).map(|(v, _)| *v).collect();
                xs.iter().sum::<f64>() / xs.len() as f64
            };
            c0 = mean_of(0);
            c1 = mean_of(1);
        }
        let agree = assign.iter().zip(&ds.truth).filter(|(a, t)| **a == t.segment).count();
        let purity = agree.max(g.len() - agree) as f64 / g.len() as f64;
        assert!(purity >= 0.99);
    }

    #[test]
    fn binary_demographic_shifts_group_means() {
        let seg = Segment {
            weight: 1.0,
            mean: DVector::from_vec(vec![0.5]),
            cov: DMatrix::from_element(1, 1, 0.5),
        };
        let spec = population(vec![seg], DMatrix::from_element(1, 1, 1.2), DemographicsSpec::Binary(vec![0.5]), 4000);
        let ds = gen_population(&spec, 5).unwrap();
        let group = |flag: f64| -> Vec<f64> {
            ds.truth.iter().filter(|t| t.demographics[0] == flag).map(|t| t.gammas[0][0]).collect()
        };
        let (a, b) = (group(1.0), group(0.0));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let se = (0.5 / a.len() as f64 + 0.5 / b.len() as f64).sqrt();
        assert!((mean(&a) - mean(&b) - 1.2).abs() < 3.0 * se);
    }

    #[test]
    fn reproducible_from_seed() {
        let cfg = GamifiedConfig::default();
        let d = cfg.layout().dim();
        let seg = Segment {
            weight: 1.0,
            mean: gamified_gammas(&cfg, &[0.5])[0].clone(),
            cov: DMatrix::identity(d, d) * 0.01,
        };
        let mut spec = population(vec![seg], DMatrix::zeros(d, 2), DemographicsSpec::Gaussian(2), 5);
        spec.source = CovariateSource::Gamified(cfg);
        spec.t_len = 40;
        spec.states_per_user = 2;
        spec.self_transition = 0.9;
        let a = gen_population(&spec, 9).unwrap();
        let b = gen_population(&spec, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_population(&spec, 10).unwrap();
        assert_ne!(a.events, c.events);
        assert!(a.events.windows(2).all(|w| (w[0].t, &w[0].user_id) < (w[1].t, &w[1].user_id)));
    }
}
