//! Orchestration of simulator runs, limit solves and convergence studies.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::Experiment;
use super::tv::{tv_distance, TvError};
use crate::exec::{derive_seed, map_indexed, stream_rng, Execution};
use crate::generators::{generator_gap, GapStats, GeneratorError};
use crate::network::{
    DescriptorDist, DescriptorSpace, NetworkError, NetworkState, SimOptions, Snapshot,
};
use crate::ode::{OdeError, OdeOptions, OdeSystem, OdeTrajectory, StateIndex, TruncatedMeasure};
use crate::picard::{
    flow_keys, windowed_solve, NodeEnsemble, PicardError, PicardOptions, WindowedSolution,
};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Picard(#[from] PicardError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Tv(#[from] TvError),
    #[error("bad study request: {0}")]
    Request(String),
}

impl StudyError {
    /// Whether the failure is numerical (no contraction, truncation leak)
    /// rather than a usage or model error.
    pub fn is_numerical(&self) -> bool {
        let picard = |e: &PicardError| matches!(e, PicardError::NoContraction { .. });
        match self {
            StudyError::Ode(OdeError::MassLeakExceeded { .. }) => true,
            StudyError::Picard(PicardError::WindowFailed { source, .. }) => picard(source),
            StudyError::Picard(e) => picard(e),
            _ => false,
        }
    }
}

/// Solver used for the limit marginals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitMethod {
    Ode,
    Picard,
}

impl LimitMethod {
    /// ODE when every law is exponential and every discipline depends on the
    /// word only, the ensemble solver otherwise.
    pub fn for_experiment(exp: &Experiment) -> Self {
        let m = &exp.model;
        if m.is_exponential() && m.disciplines.iter().all(|d| d.is_word_function()) {
            LimitMethod::Ode
        } else {
            LimitMethod::Picard
        }
    }
}

/// Limit marginals, `nodes[i][v]` at `times[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitMarginals {
    pub method: LimitMethod,
    pub times: Vec<f64>,
    pub nodes: Vec<Vec<DescriptorDist>>,
}

fn check_times(times: &[f64]) -> Result<f64, StudyError> {
    if times.is_empty() || times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return Err(StudyError::Request(format!(
            "times must be a nonempty list of finite values >= 0, got {times:?}"
        )));
    }
    Ok(times.iter().copied().fold(0.0, f64::max))
}

pub fn solve_ode(
    exp: &Experiment,
    times: &[f64],
    exec: Execution,
) -> Result<(StateIndex, OdeTrajectory), StudyError> {
    check_times(times)?;
    let s = exp.config.ode;
    let index = StateIndex::for_model(&exp.model, &exp.initial, s.truncation, s.max_dim)?;
    let sys = OdeSystem::new(
        &exp.model,
        index.clone(),
        OdeOptions {
            leak_tol: s.leak_tol,
            exec,
        },
    )?;
    let mu0 = TruncatedMeasure::from_initial(&exp.initial, &index)?;
    let traj = sys.integrate_at(&mu0, times, s.dt)?;
    Ok((index, traj))
}

pub fn picard_options(exp: &Experiment, exec: Execution) -> PicardOptions {
    let s = exp.config.picard;
    PicardOptions {
        step: s.step,
        batches: s.batches,
        lipschitz: s.lipschitz,
        max_iter: s.max_iter,
        observation: exp.config.observation,
        exec,
        ..PicardOptions::default()
    }
}

/// Windowed ensemble solve up to the first window multiple covering `horizon`.
pub fn solve_picard(
    exp: &Experiment,
    horizon: f64,
    seed: u64,
    exec: Execution,
) -> Result<WindowedSolution, StudyError> {
    let s = exp.config.picard;
    let windows = (horizon / s.window - 1e-9).ceil().max(1.0);
    let ens = NodeEnsemble::sample(
        &exp.model,
        &exp.initial,
        s.replicas,
        derive_seed(seed, 0xe45),
    )?;
    let keys = flow_keys(&exp.model, &exp.initial);
    let opts = picard_options(exp, exec);
    Ok(windowed_solve(
        &exp.model,
        &ens,
        &keys,
        windows * s.window,
        s.window,
        s.tol,
        &opts,
        derive_seed(seed, 0x91c),
    )?)
}

pub fn limit_marginals(
    exp: &Experiment,
    times: &[f64],
    seed: u64,
    exec: Execution,
) -> Result<LimitMarginals, StudyError> {
    let horizon = check_times(times)?;
    let space = exp.config.observation;
    let method = LimitMethod::for_experiment(exp);
    let nodes = match method {
        LimitMethod::Ode => {
            let (index, traj) = solve_ode(exp, times, exec)?;
            traj.states
                .iter()
                .map(|mu| {
                    exp.model
                        .graph
                        .nodes()
                        .map(|v| mu.descriptors(v, &index, space))
                        .collect()
                })
                .collect()
        }
        LimitMethod::Picard => {
            let sol = solve_picard(exp, horizon, seed, exec)?;
            times
                .iter()
                .map(|&t| {
                    sol.snapshots
                        .iter()
                        .find(|s| (s.time - t).abs() <= 1e-9 * t.max(1.0))
                        .map(|s| s.nodes.clone())
                        .ok_or_else(|| {
                            StudyError::Request(format!(
                                "time {t} is not a multiple of the ensemble step"
                            ))
                        })
                })
                .collect::<Result<_, _>>()?
        }
    };
    Ok(LimitMarginals {
        method,
        times: times.to_vec(),
        nodes,
    })
}

/// Seed of simulation run `run` at copy count `n`.
pub fn run_seed(seed: u64, n: usize, run: usize) -> u64 {
    derive_seed(derive_seed(seed, n as u64), run as u64)
}

/// One simulator run of the experiment with `n` copies, snapshots at `times`.
pub fn simulate(
    exp: &Experiment,
    n: usize,
    times: &[f64],
    seed: u64,
) -> Result<Vec<Snapshot>, StudyError> {
    let horizon = check_times(times)?;
    let opts = SimOptions {
        event_budget: exp.config.event_budget,
        observation: exp.config.observation,
        keep_full: false,
    };
    let mut state = NetworkState::init(&exp.model, n, &exp.initial, seed, opts)?;
    Ok(state.run(horizon, times)?.snapshots)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub n: usize,
    pub time: f64,
    /// Node name, or `max` for the maximum over nodes.
    pub node: String,
    pub tv: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub seeds: usize,
}

/// Trend of the max-over-nodes distance along the copy counts at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub time: f64,
    pub strictly_decreasing: bool,
    /// Confidence intervals of the smallest and largest `N` do not overlap.
    pub separated: bool,
    /// Least-squares slope of `log tv` against `log N`.
    pub log_slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub label: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub name: String,
    pub method: LimitMethod,
    pub observation: DescriptorSpace,
    pub copies: Vec<usize>,
    pub times: Vec<f64>,
    pub seeds: usize,
    pub rows: Vec<ComparisonRow>,
    pub trends: Vec<Trend>,
    #[serde(skip)]
    pub timings: Vec<Timing>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOptions {
    pub seeds: usize,
    pub seed: u64,
    pub bootstrap: usize,
    pub exec: Execution,
}

impl StudyOptions {
    pub fn from_experiment(exp: &Experiment) -> Self {
        StudyOptions {
            seeds: exp.config.seeds,
            seed: exp.config.seed,
            bootstrap: 400,
            exec: Execution::Parallel,
        }
    }
}

/// Averages `dists[s]` over the seed indices in `pick`.
fn average(space: DescriptorSpace, dists: &[&DescriptorDist], pick: &[usize]) -> DescriptorDist {
    DescriptorDist::average(space, pick.iter().map(|&s| dists[s]))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Compares seed-averaged empirical marginals with the limit marginals for
/// every copy count in `copies` and every time in `times`. Confidence
/// intervals are bootstrap percentiles over seeds.
pub fn run_convergence_study(
    exp: &Experiment,
    copies: &[usize],
    times: &[f64],
    opts: &StudyOptions,
) -> Result<ComparisonReport, StudyError> {
    check_times(times)?;
    if copies.is_empty() || copies.contains(&0) {
        return Err(StudyError::Request(
            "copy counts must be a nonempty list of positive values".into(),
        ));
    }
    if opts.bootstrap == 0 {
        return Err(StudyError::Request(
            "bootstrap resample count must be positive".into(),
        ));
    }
    if opts.seeds < 10 {
        return Err(StudyError::Request(format!(
            "at least 10 seeds are needed, got {}",
            opts.seeds
        )));
    }
    let space = exp.config.observation;
    let mut timings = Vec::new();
    let clock = Instant::now();
    let limit = limit_marginals(exp, times, opts.seed, opts.exec)?;
    timings.push(Timing {
        label: format!("limit ({:?})", limit.method).to_lowercase(),
        seconds: clock.elapsed().as_secs_f64(),
    });

    let n_nodes = exp.model.node_count();
    let names: Vec<String> = exp
        .model
        .graph
        .nodes()
        .map(|v| exp.model.graph.name(v).to_string())
        .collect();
    let mut rows = Vec::new();
    for (ni, &n) in copies.iter().enumerate() {
        let clock = Instant::now();
        let runs = map_indexed(opts.exec, opts.seeds, |s| {
            simulate(exp, n, times, run_seed(opts.seed, n, s))
        });
        let runs: Vec<Vec<Snapshot>> = runs.into_iter().collect::<Result<_, _>>()?;
        timings.push(Timing {
            label: format!("simulate N={n}"),
            seconds: clock.elapsed().as_secs_f64(),
        });

        let mut rng = stream_rng(derive_seed(opts.seed, 0xb007), ni as u64);
        let resamples: Vec<Vec<usize>> = (0..opts.bootstrap)
            .map(|_| {
                (0..opts.seeds)
                    .map(|_| rng.random_range(0..opts.seeds))
                    .collect()
            })
            .collect();
        let all: Vec<usize> = (0..opts.seeds).collect();
        // snapshots come back sorted by time
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        for (ti, &t) in times.iter().enumerate() {
            let si = order.iter().position(|&o| o == ti).unwrap_or(ti);
            let mut node_tv = Vec::with_capacity(n_nodes);
            let mut boot = vec![vec![0.0; n_nodes]; opts.bootstrap];
            for v in 0..n_nodes {
                let dists: Vec<&DescriptorDist> =
                    runs.iter().map(|r| &r[si].nodes[v].descriptors).collect();
                let target = &limit.nodes[ti][v];
                node_tv.push(tv_distance(&average(space, &dists, &all), target)?);
                for (b, pick) in resamples.iter().enumerate() {
                    boot[b][v] = tv_distance(&average(space, &dists, pick), target)?;
                }
            }
            let mut push = |node: String, tv: f64, mut samples: Vec<f64>| {
                samples.sort_by(f64::total_cmp);
                let (ci_low, ci_high) = (percentile(&samples, 0.025), percentile(&samples, 0.975));
                rows.push(ComparisonRow {
                    n,
                    time: t,
                    node,
                    tv,
                    ci_low,
                    ci_high,
                    seeds: opts.seeds,
                });
            };
            for v in 0..n_nodes {
                push(
                    names[v].clone(),
                    node_tv[v],
                    boot.iter().map(|b| b[v]).collect(),
                );
            }
            let max = node_tv.iter().copied().fold(0.0, f64::max);
            push(
                "max".into(),
                max,
                boot.iter()
                    .map(|b| b.iter().copied().fold(0.0, f64::max))
                    .collect(),
            );
        }
    }

    let trends = times.iter().map(|&t| trend(&rows, copies, t)).collect();
    Ok(ComparisonReport {
        name: exp.config.name.clone(),
        method: limit.method,
        observation: space,
        copies: copies.to_vec(),
        times: times.to_vec(),
        seeds: opts.seeds,
        rows,
        trends,
        timings,
    })
}

fn trend(rows: &[ComparisonRow], copies: &[usize], t: f64) -> Trend {
    let mut pts: Vec<&ComparisonRow> = rows
        .iter()
        .filter(|r| r.node == "max" && r.time == t)
        .collect();
    pts.sort_by_key(|r| r.n);
    let strictly_decreasing = pts.windows(2).all(|w| w[1].tv < w[0].tv);
    let separated = match (pts.first(), pts.last()) {
        (Some(a), Some(b)) if copies.len() > 1 => a.ci_low > b.ci_high,
        _ => false,
    };
    let xy: Vec<(f64, f64)> = pts
        .iter()
        .filter(|r| r.tv > 0.0)
        .map(|r| ((r.n as f64).ln(), r.tv.ln()))
        .collect();
    let k = xy.len() as f64;
    let (mx, my) = (
        xy.iter().map(|p| p.0).sum::<f64>() / k,
        xy.iter().map(|p| p.1).sum::<f64>() / k,
    );
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let log_slope = (sxx > 0.0).then(|| sxy / sxx);
    Trend {
        time: t,
        strictly_decreasing,
        separated,
        log_slope,
    }
}

/// Generator gaps for every configured test function.
pub fn generator_check(
    exp: &Experiment,
    seed: u64,
    exec: Execution,
) -> Result<Vec<GapStats>, StudyError> {
    let g = exp
        .config
        .generator
        .as_ref()
        .ok_or_else(|| StudyError::Request("the config has no `generator` section".into()))?;
    let mut out = Vec::new();
    for f in &exp.functions {
        out.extend(generator_gap(
            &exp.model,
            f,
            &g.copies,
            &exp.sampler,
            g.samples,
            seed,
            exec,
        )?);
    }
    Ok(out)
}
