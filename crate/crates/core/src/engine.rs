//! Multi-user engine: one particle cloud per user, advanced tick by tick,
//! with the hierarchical population step run at scheduled barriers.

use std::collections::BTreeMap;

use log::info;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{FilterConfig, LambdaPrior, ParticleCloud, ParticleFilter};
use crate::hierarchy::{
    delta_observations, mixture_prior, refresh_particle_priors, summarize_cloud, update_delta, BarrierSchedule,
    DeltaPosterior, DemographicsTable, LambdaRow,
};
use crate::model::{HyperParams, ObservationRecord};
use crate::rng::{purpose, stream};
use crate::smoother::{path_modes, smooth};
use crate::vb::{run_vem, VariationalPosterior, VbPrior};

/// Stream tag for engine-wide draws that belong to no single user.
const GLOBAL_TAG: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub hp: HyperParams,
    pub filter: FilterConfig,
    pub barrier: BarrierSchedule,
    pub vb_max_iter: usize,
    pub vb_tol: f64,
}

impl EngineConfig {
    pub fn new(hp: HyperParams) -> Self {
        Self {
            hp,
            filter: FilterConfig::default(),
            barrier: BarrierSchedule::default(),
            vb_max_iter: 200,
            vb_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTotals {
    pub steps: u64,
    pub log_predictive: f64,
    pub ess_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierEvent {
    pub tick: u64,
    pub rows: usize,
    pub elbo: f64,
    /// Clusters with expected size above one.
    pub clusters: usize,
}

/// Everything needed to resume the engine exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub config: EngineConfig,
    /// Last processed global tick.
    pub tick: u64,
    pub clouds: BTreeMap<String, ParticleCloud>,
    pub totals: BTreeMap<String, UserTotals>,
    pub demographics: DemographicsTable,
    pub population: Option<VariationalPosterior>,
    pub delta: DeltaPosterior,
    pub delta_draw: DMatrix<f64>,
    pub barriers: Vec<BarrierEvent>,
}

pub struct Engine {
    state: EngineState,
    filter: ParticleFilter,
}

impl Engine {
    pub fn new(config: EngineConfig, demographics: DemographicsTable) -> Result<Self> {
        config.hp.validate()?;
        if demographics.dim != config.hp.demographics_dim() {
            return Err(Error::Dimension {
                what: "demographics table",
                expected: config.hp.demographics_dim(),
                got: demographics.dim,
            });
        }
        if config.vb_max_iter == 0 || !(config.vb_tol > 0.0) {
            return Err(Error::Config("VB needs max_iter ≥ 1 and tol > 0".into()));
        }
        let hp = &config.hp;
        let state = EngineState {
            tick: 0,
            clouds: BTreeMap::new(),
            totals: BTreeMap::new(),
            demographics,
            population: None,
            delta: DeltaPosterior::prior(&hp.delta_mean, hp.delta_var),
            delta_draw: hp.delta_mean.clone(),
            barriers: Vec::new(),
            config,
        };
        Self::from_state(state)
    }

    /// Resumes from a saved state.
    pub fn from_state(state: EngineState) -> Result<Self> {
        let filter = ParticleFilter::new(state.config.hp.clone(), state.config.filter.clone())?;
        Ok(Self { state, filter })
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn into_state(self) -> EngineState {
        self.state
    }

    fn prior_for(&self, user_id: &str) -> LambdaPrior {
        let shift = &self.state.delta_draw * self.state.demographics.get(user_id);
        match &self.state.population {
            Some(vp) => mixture_prior(vp, &shift),
            None => LambdaPrior::baseline(&self.state.config.hp, &shift),
        }
    }

    /// Absorbs every event of global tick `t`, then runs the barrier if due.
    pub fn process_tick(&mut self, t: u64, records: &[&ObservationRecord]) -> Result<()> {
        if t <= self.state.tick && !(t == 0 && self.state.clouds.is_empty() && self.state.tick == 0) {
            return Err(Error::Data(format!(
                "tick {t} does not follow the last processed tick {}",
                self.state.tick
            )));
        }
        for obs in records {
            if obs.t != t {
                return Err(Error::Data(format!("record for t={} passed to tick {t}", obs.t)));
            }
            if self.state.clouds.contains_key(&obs.user_id) {
                let cloud = self.state.clouds.get_mut(&obs.user_id).expect("present");
                let diag = self.filter.step(cloud, obs)?;
                let tot = self.state.totals.get_mut(&obs.user_id).expect("totals kept with clouds");
                tot.steps += 1;
                tot.log_predictive += diag.log_predictive;
                tot.ess_sum += diag.ess;
            } else {
                let prior = self.prior_for(&obs.user_id);
                let cloud = self.filter.init_cloud(obs, prior)?;
                self.state.clouds.insert(obs.user_id.clone(), cloud);
                self.state.totals.insert(
                    obs.user_id.clone(),
                    UserTotals {
                        steps: 0,
                        log_predictive: 0.0,
                        ess_sum: 0.0,
                    },
                );
            }
        }
        self.state.tick = t;
        if self.state.config.barrier.is_due(t) {
            self.barrier()?;
        }
        Ok(())
    }

    /// Processes records in `(t, user_id)` order.
    pub fn run(&mut self, records: &[ObservationRecord]) -> Result<()> {
        let mut sorted: Vec<&ObservationRecord> = records.iter().collect();
        sorted.sort_by(|a, b| a.t.cmp(&b.t).then_with(|| a.user_id.cmp(&b.user_id)));
        let mut i = 0;
        while i < sorted.len() {
            let t = sorted[i].t;
            let j = i + sorted[i..].iter().take_while(|r| r.t == t).count();
            self.process_tick(t, &sorted[i..j])?;
            i = j;
        }
        Ok(())
    }

    /// The hierarchical step: Δ update and draw, population fit, prior refresh.
    pub fn barrier(&mut self) -> Result<()> {
        let tick = self.state.tick;
        let hp = self.state.config.hp.clone();
        let mut rows = Vec::new();
        for (user, cloud) in &self.state.clouds {
            let demo = self.state.demographics.get(user);
            for (state, lambda) in summarize_cloud(cloud)? {
                rows.push(LambdaRow {
                    user_id: user.clone(),
                    state,
                    demographics: demo.clone(),
                    lambda,
                });
            }
        }
        if rows.is_empty() {
            return Ok(());
        }
        let previous = self.state.population.as_ref().map(|vp| (vp, &self.state.delta_draw));
        let obs = delta_observations(&rows, previous, &hp)?;
        let delta = update_delta(&obs, &hp.delta_mean, hp.delta_var)?;
        let mut rng = stream(hp.seed, &[GLOBAL_TAG, tick, purpose::BARRIER]);
        let draw = delta.sample(&mut rng);

        let points: Vec<DVector<f64>> = rows.iter().map(|r| &r.lambda - &draw * &r.demographics).collect();
        let mut rng = stream(hp.seed, &[GLOBAL_TAG, tick, purpose::VB_INIT]);
        let vp = run_vem(
            &points,
            &VbPrior::from_hyper(&hp),
            hp.k_trunc,
            &mut rng,
            self.state.config.vb_max_iter,
            self.state.config.vb_tol,
        )?;

        let mut by_user: BTreeMap<&str, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        for (i, r) in rows.iter().enumerate() {
            by_user
                .entry(r.user_id.as_str())
                .or_default()
                .insert(r.state, vp.phi.row(i).iter().copied().collect());
        }
        for (user, cloud) in self.state.clouds.iter_mut() {
            let empty = BTreeMap::new();
            let resp = by_user.get(user.as_str()).unwrap_or(&empty);
            let demo = self.state.demographics.get(user);
            refresh_particle_priors(&vp, &draw, &demo, resp, cloud, hp.seed, tick)?;
        }
        let event = BarrierEvent {
            tick,
            rows: rows.len(),
            elbo: vp.elbo().unwrap_or(f64::NAN),
            clusters: vp.effective_clusters(1.0),
        };
        info!(
            "barrier at tick {tick}: {} rows, ELBO {:.4}, {} clusters",
            event.rows, event.elbo, event.clusters
        );
        self.state.barriers.push(event);
        self.state.delta = delta;
        self.state.delta_draw = draw;
        self.state.population = Some(vp);
        Ok(())
    }

    pub fn report(&self) -> Report {
        let users = self
            .state
            .clouds
            .iter()
            .map(|(user, cloud)| {
                let tot = &self.state.totals[user];
                UserSummary {
                    user_id: user.clone(),
                    t: cloud.t,
                    steps: tot.steps,
                    total_log_predictive: tot.log_predictive,
                    mean_ess: if tot.steps > 0 {
                        tot.ess_sum / tot.steps as f64
                    } else {
                        cloud.len() as f64
                    },
                    l_histogram: cloud.l_histogram(),
                    modal_l: cloud.modal_l(),
                }
            })
            .collect();
        let population = self.state.population.as_ref().map(|vp| PopulationSummary {
            k: vp.k,
            weights: vp.expected_weights(),
            counts: vp.counts(),
            means: vp.m.iter().map(|m| m.iter().copied().collect()).collect(),
            elbo_trace: vp.elbo_trace.clone(),
        });
        Report {
            tick: self.state.tick,
            users,
            barriers: self.state.barriers.clone(),
            delta_mean: matrix_rows(&self.state.delta.mean),
            population,
        }
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSummary {
    pub user_id: String,
    pub t: u64,
    pub steps: u64,
    pub total_log_predictive: f64,
    pub mean_ess: f64,
    /// `l_histogram[k]` particles hold `k + 1` states.
    pub l_histogram: Vec<usize>,
    pub modal_l: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSummary {
    pub k: usize,
    pub weights: Vec<f64>,
    pub counts: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub elbo_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tick: u64,
    pub users: Vec<UserSummary>,
    pub barriers: Vec<BarrierEvent>,
    pub delta_mean: Vec<Vec<f64>>,
    pub population: Option<PopulationSummary>,
}

/// Smoothed per-time modal state path for one user's cloud (needs snapshots).
pub fn smoothed_path(cloud: &ParticleCloud, n_paths: usize, seed: u64) -> Result<Vec<usize>> {
    let snaps = cloud
        .snapshots
        .as_ref()
        .ok_or_else(|| Error::Config("smoothing needs snapshots; enable keep_snapshots".into()))?;
    let mut rng = stream(seed, &[cloud.user_tag, cloud.t, purpose::SMOOTH]);
    Ok(path_modes(&smooth(snaps, n_paths, &mut rng)?))
}
