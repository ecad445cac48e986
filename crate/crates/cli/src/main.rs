use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use ihmm_core::checkpoint;
use ihmm_core::engine::{smoothed_path, Engine, EngineConfig, EngineState};
use ihmm_core::filter::Weighting;
use ihmm_core::hierarchy::{BarrierSchedule, Demographics, DemographicsTable};
use ihmm_core::io::{ingest, read_jsonl, write_events, write_jsonl, Covariates, IngestReport};
use ihmm_core::model::{CovariateLayout, HyperParams, ObservationRecord, SLOT_INTERCEPT};
use ihmm_core::nalgebra::{DMatrix, DVector};
use ihmm_core::oracle::{
    collapsed_gibbs, exact_posterior, filter_smoother_paths, site_marginals, total_variation, Labeling,
    TinyInstance,
};
use ihmm_core::rng::stream;
use ihmm_core::simulate::{
    gamified_gammas, gen_population, CovariateSource, DemographicsSpec, GamifiedConfig, PopulationSpec, Segment,
};
use ihmm_core::smoother::filtered_modes;
use ihmm_core::vb::{run_vem, VbPrior};
use ihmm_core::{Error, ErrorClass};

/// Streaming infinite-HMM inference for binary engagement events.
///
/// Every flag can also be set through the environment variable named next to
/// it; a flag on the command line wins over the environment, which wins over
/// the default.
#[derive(Debug, Parser)]
#[command(name = "ihmm", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Particles per user.
    #[arg(long, env = "IHMM_PARTICLES", default_value_t = 500, global = true)]
    particles: usize,
    #[arg(long, env = "IHMM_SEED", default_value_t = 0, global = true)]
    seed: u64,
    /// Ticks between hierarchical barriers; 0 disables them.
    #[arg(long, env = "IHMM_BARRIER_PERIOD", default_value_t = 25, global = true)]
    barrier_period: u64,
    /// Truncation level of the population mixture.
    #[arg(long, env = "IHMM_K_TRUNC", default_value_t = 30, global = true)]
    k_trunc: usize,
    /// Checkpoint file: resumed from when present, written after the run.
    #[arg(long, env = "IHMM_CHECKPOINT", global = true)]
    checkpoint: Option<PathBuf>,
    /// Reject unknown fields and out-of-order events instead of skipping them.
    #[arg(long, env = "IHMM_STRICT", global = true)]
    strict: bool,
    /// Weight particles by the conditional normal density of drawn utilities.
    #[arg(long, env = "IHMM_FIDELITY_WEIGHTS", global = true)]
    fidelity_weights: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long, env = "IHMM_OUT", global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a population and write events, demographics and ground truth.
    Simulate {
        #[arg(long, default_value_t = 5)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        t: u64,
        #[arg(long, default_value_t = 2)]
        states: usize,
        #[arg(long, default_value_t = 2)]
        n_tags: usize,
        #[arg(long, default_value_t = 2)]
        demographics_dim: usize,
        /// Intercept-only covariates (`x = [1]`).
        #[arg(long)]
        intercept_only: bool,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Filter an event stream and report per-user diagnostics.
    Filter(StreamArgs),
    /// Filter with snapshots and report smoothed state paths.
    Smooth {
        #[command(flatten)]
        stream: StreamArgs,
        /// Backward paths drawn per user.
        #[arg(long, default_value_t = 1000)]
        paths: usize,
    },
    /// Fit the truncated Dirichlet-process mixture to a JSONL file of points.
    Vb {
        input: PathBuf,
        #[arg(long, default_value_t = 500)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// Prior cluster covariance as a fraction of the data variance.
        #[arg(long, default_value_t = 0.1)]
        prior_scale: f64,
    },
    /// Compare the Gibbs sampler and the filter against exact enumeration on
    /// the bundled tiny instance; exits 0 only if both are within TV 0.05.
    GibbsCheck {
        #[arg(long, default_value_t = 100_000)]
        sweeps: usize,
        #[arg(long, default_value_t = 1_000)]
        burn_in: usize,
        #[arg(long, default_value_t = 20_000)]
        filter_particles: usize,
        #[arg(long, default_value_t = 20_000)]
        paths: usize,
    },
    /// Print the report stored in a checkpoint (`--checkpoint`).
    Report,
}

#[derive(Debug, Args)]
struct StreamArgs {
    /// Events JSONL; stdin when omitted.
    events: Option<PathBuf>,
    /// Demographics JSONL (`{"user_id": .., "D": [..]}` per line).
    #[arg(long)]
    demographics: Option<PathBuf>,
}

const TV_LIMIT: f64 = 0.05;

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data | ErrorClass::Io => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> ihmm_core::Result<u8> {
    let c = &cli.common;
    match &cli.command {
        Command::Simulate {
            users,
            t,
            states,
            n_tags,
            demographics_dim,
            intercept_only,
            out_dir,
        } => {
            let report = simulate(c, *users, *t, *states, *n_tags, *demographics_dim, *intercept_only, out_dir)?;
            emit(c, &report)?;
            Ok(0)
        }
        Command::Filter(args) => {
            let report = filter(c, args, None)?;
            emit(c, &report)?;
            Ok(0)
        }
        Command::Smooth { stream, paths } => {
            let report = filter(c, stream, Some(*paths))?;
            emit(c, &report)?;
            Ok(0)
        }
        Command::Vb {
            input,
            max_iter,
            tol,
            prior_scale,
        } => {
            let report = vb(c, input, *max_iter, *tol, *prior_scale)?;
            emit(c, &report)?;
            Ok(0)
        }
        Command::GibbsCheck {
            sweeps,
            burn_in,
            filter_particles,
            paths,
        } => {
            let (report, pass) = gibbs_check(c, *sweeps, *burn_in, *filter_particles, *paths)?;
            emit(c, &report)?;
            Ok(if pass { 0 } else { 1 })
        }
        Command::Report => {
            let path = c
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("report needs --checkpoint".into()))?;
            let state: EngineState = checkpoint::load(path)?;
            let engine = Engine::from_state(state)?;
            emit(c, &to_value(&engine.report())?)?;
            Ok(0)
        }
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> ihmm_core::Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Data(e.to_string()))
}

fn emit(c: &Common, report: &Value) -> ihmm_core::Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Data(e.to_string()))?;
    match &c.out {
        Some(p) => fs::write(p, text + "\n")?,
        None => {
            let mut out = io::stdout().lock();
            writeln!(out, "{text}")?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    c: &Common,
    users: usize,
    t_len: u64,
    states: usize,
    n_tags: usize,
    d_demo: usize,
    intercept_only: bool,
    out_dir: &Path,
) -> ihmm_core::Result<Value> {
    let (source, means) = if intercept_only {
        let m = |a: f64| DVector::from_vec(vec![a]);
        (CovariateSource::Intercept, vec![m(1.0), m(-1.0)])
    } else {
        let cfg = GamifiedConfig {
            n_tags,
            ..GamifiedConfig::default()
        };
        let means = gamified_gammas(&cfg, &[1.0, -1.0]);
        (CovariateSource::Gamified(cfg), means)
    };
    let d = source.dim();
    let mut cov = DMatrix::zeros(d, d);
    cov[(SLOT_INTERCEPT, SLOT_INTERCEPT)] = 1.5;
    let segments = means
        .into_iter()
        .map(|mean| Segment {
            weight: 0.5,
            mean,
            cov: cov.clone(),
        })
        .collect();
    let mut delta = DMatrix::zeros(d, d_demo);
    for j in 0..d_demo {
        delta[(SLOT_INTERCEPT, j)] = if j % 2 == 0 { 0.5 } else { -0.5 };
    }
    let spec = PopulationSpec {
        users,
        t_len,
        states_per_user: states,
        self_transition: 0.95,
        segments,
        delta,
        demographics: DemographicsSpec::Binary(vec![0.5; d_demo]),
        source,
    };
    let ds = gen_population(&spec, c.seed)?;
    fs::create_dir_all(out_dir)?;
    let events = out_dir.join("events.jsonl");
    let demographics = out_dir.join("demographics.jsonl");
    let truth = out_dir.join("truth.jsonl");
    write_events(BufWriter::new(File::create(&events)?), &ds.events)?;
    write_jsonl(BufWriter::new(File::create(&demographics)?), &ds.demographics)?;
    write_jsonl(BufWriter::new(File::create(&truth)?), &ds.truth)?;
    Ok(json!({
        "users": users,
        "t": t_len,
        "events": ds.events.len(),
        "dim": d,
        "files": {
            "events": events,
            "demographics": demographics,
            "truth": truth,
        },
    }))
}

fn read_events(args: &StreamArgs, strict: bool) -> ihmm_core::Result<IngestReport> {
    match &args.events {
        Some(p) => ingest(BufReader::new(File::open(p)?), strict),
        None => {
            let mut buf = String::new();
            io::stdin().lock().read_to_string(&mut buf)?;
            ingest(buf.as_bytes(), strict)
        }
    }
}

fn observations(report: &IngestReport) -> ihmm_core::Result<(Vec<ObservationRecord>, usize)> {
    let n_tags = report.records.iter().find_map(|r| match &r.covariates {
        Covariates::Named(f) => Some(f.tag.len()),
        Covariates::Packed(_) => None,
    });
    let layout = CovariateLayout::new(n_tags.unwrap_or(0));
    let obs = report
        .records
        .iter()
        .map(|r| r.to_observation(&layout))
        .collect::<ihmm_core::Result<Vec<_>>>()?;
    let d = obs.first().map_or(0, |o| o.x.len());
    if let Some(bad) = obs.iter().find(|o| o.x.len() != d) {
        return Err(Error::Data(format!(
            "user {} t={}: covariate length {} differs from {d}",
            bad.user_id,
            bad.t,
            bad.x.len()
        )));
    }
    Ok((obs, d))
}

fn filter(c: &Common, args: &StreamArgs, smooth_paths: Option<usize>) -> ihmm_core::Result<Value> {
    let ingested = read_events(args, c.strict)?;
    let (obs, d) = observations(&ingested)?;
    let demo_rows: Vec<Demographics> = match &args.demographics {
        Some(p) => read_jsonl(BufReader::new(File::open(p)?))?,
        None => Vec::new(),
    };
    let d_demo = demo_rows.first().map_or(0, |r| r.d.len());

    let resumed = match &c.checkpoint {
        Some(p) if p.exists() => Some(checkpoint::load::<EngineState>(p)?),
        _ => None,
    };
    let mut engine = match resumed {
        Some(state) => {
            info!("resuming from tick {}", state.tick);
            Engine::from_state(state)?
        }
        None => {
            if obs.is_empty() {
                return Err(Error::Data("no events to filter".into()));
            }
            let mut hp = HyperParams::for_dim(d, d_demo);
            hp.particles = c.particles;
            hp.seed = c.seed;
            hp.k_trunc = c.k_trunc;
            let mut config = EngineConfig::new(hp);
            config.barrier = match c.barrier_period {
                0 => BarrierSchedule::disabled(),
                p => BarrierSchedule::every(p)?,
            };
            if c.fidelity_weights {
                config.filter.weighting = Weighting::ConditionalNormal;
            }
            config.filter.keep_snapshots = smooth_paths.is_some();
            Engine::new(config, DemographicsTable::new(d_demo, demo_rows)?)?
        }
    };
    let start = engine.state().tick;
    let fresh: Vec<ObservationRecord> = obs.into_iter().filter(|o| start == 0 || o.t > start).collect();
    engine.run(&fresh)?;
    if let Some(p) = &c.checkpoint {
        checkpoint::save(p, engine.state())?;
    }

    let mut report = to_value(&engine.report())?;
    report["ingest"] = json!({
        "records": ingested.records.len(),
        "malformed": ingested.malformed,
        "out_of_order": ingested.out_of_order,
        "unknown_fields": ingested.unknown_fields,
    });
    if let Some(n) = smooth_paths {
        let mut paths = serde_json::Map::new();
        for (user, cloud) in &engine.state().clouds {
            let smoothed = smoothed_path(cloud, n, engine.state().config.hp.seed)?;
            let filtered = filtered_modes(cloud.snapshots.as_deref().unwrap_or_default());
            paths.insert(user.clone(), json!({ "first_t": cloud.snapshots.as_ref().and_then(|s| s.first()).map(|s| s.t), "smoothed": smoothed, "filtered": filtered }));
        }
        report["paths"] = Value::Object(paths);
    }
    Ok(report)
}

fn vb(c: &Common, input: &Path, max_iter: usize, tol: f64, prior_scale: f64) -> ihmm_core::Result<Value> {
    let rows: Vec<Value> = read_jsonl(BufReader::new(File::open(input)?))?;
    let points = rows
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let arr = v.get("x").unwrap_or(v).as_array().ok_or_else(|| Error::Schema {
                line: i + 1,
                reason: "expected an array or {\"x\": [...]}".into(),
            })?;
            let xs = arr
                .iter()
                .map(|e| e.as_f64())
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::Schema {
                    line: i + 1,
                    reason: "point entries must be numbers".into(),
                })?;
            Ok(DVector::from_vec(xs))
        })
        .collect::<ihmm_core::Result<Vec<_>>>()?;
    let p = points.first().ok_or_else(|| Error::Data("no points".into()))?.len();
    let n = points.len() as f64;
    let mean = points.iter().fold(DVector::zeros(p), |a, x| a + x) / n;
    let var = points
        .iter()
        .fold(DVector::zeros(p), |a: DVector<f64>, x| a + (x - &mean).map(|v| v * v))
        / n;
    let a0 = p as f64 + 2.0;
    let prior = VbPrior {
        m0: mean,
        beta0: 0.01,
        a0,
        b0: DMatrix::from_diagonal(&var.map(|v| (v * prior_scale).max(1e-8) * a0)),
        a_v0: 1.0,
        b_v0: 1.0,
    };
    let mut rng = stream(c.seed, &[0]);
    let vp = run_vem(&points, &prior, c.k_trunc, &mut rng, max_iter, tol)?;
    Ok(json!({
        "k": vp.k,
        "effective_clusters": vp.effective_clusters(1.0),
        "counts": vp.counts(),
        "weights": vp.expected_weights(),
        "means": vp.m.iter().map(|m| m.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
        "elbo_trace": vp.elbo_trace,
    }))
}

fn gibbs_check(
    c: &Common,
    sweeps: usize,
    burn_in: usize,
    filter_particles: usize,
    paths: usize,
) -> ihmm_core::Result<(Value, bool)> {
    let inst = TinyInstance::bundled();
    let exact = exact_posterior(&inst, Labeling::Fixed)?;
    let mut rng = stream(c.seed, &[1]);
    let gibbs = collapsed_gibbs(&inst, sweeps, burn_in, &mut rng)?;
    let tv_gibbs = total_variation(&exact, &gibbs);

    let exact_fa = exact_posterior(&inst, Labeling::FirstAppearance)?;
    let filtered = filter_smoother_paths(&inst, filter_particles, paths, c.seed)?;
    let tv_filter = total_variation(&exact_fa, &filtered);
    let pass = tv_gibbs <= TV_LIMIT && tv_filter <= TV_LIMIT;
    let k = inst.k();
    let report = json!({
        "tv_gibbs": tv_gibbs,
        "tv_filter": tv_filter,
        "limit": TV_LIMIT,
        "pass": pass,
        "marginals": {
            "exact": site_marginals(&exact, k),
            "gibbs": site_marginals(&gibbs, k),
            "exact_first_appearance": site_marginals(&exact_fa, k),
            "filter": site_marginals(&filtered, k),
        },
    });
    Ok((report, pass))
}
