//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use std::collections::VecDeque;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use swapnet::generators::{
    frechet, from_truncated, omega_limit, sample_atomic, Observable, Polynomial, TestFunction,
};
use swapnet::harness::study::{self, generator_check, StudyOptions};
use swapnet::harness::{load_config, run_convergence_study, tv_distance, Experiment};
use swapnet::model::{ArrivalTable, InitialLaw, QueueLaw};
use swapnet::network::{NetworkState, SimOptions};
use swapnet::ode::{OdeOptions, OdeSystem, StateIndex, TruncatedMeasure};
use swapnet::picard::{flow_keys, windowed_solve, NodeEnsemble};
use swapnet::{ClassId, Discipline, Execution, Graph, GraphSpec, Model, NodeId, ServiceLaw};

type Check = Result<String, String>;

fn config(name: &str) -> Experiment {
    load_config(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../configs")
            .join(name),
    )
    .expect("shipped config loads")
}

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// 1. Greedy kernel against BFS from every destination.
fn routing_oracle() -> Check {
    let mut pairs = 0;
    for spec in [
        GraphSpec::grid(5, 5, 0.1),
        common::random_connected(30, 20, 2024),
    ] {
        let g = Graph::build(&spec).map_err(|e| e.to_string())?;
        let n = g.node_count();
        let adj: Vec<Vec<usize>> = (0..n)
            .map(|v| g.neighbors(NodeId(v)).iter().map(|(w, _)| w.0).collect())
            .collect();
        for d in 0..n {
            let mut dist = vec![usize::MAX; n];
            dist[d] = 0;
            let mut q = VecDeque::from([d]);
            while let Some(u) = q.pop_front() {
                for &w in &adj[u] {
                    if dist[w] == usize::MAX {
                        dist[w] = dist[u] + 1;
                        q.push_back(w);
                    }
                }
            }
            for v in 0..n {
                let got = g.routing_kernel(NodeId(v), NodeId(d));
                if dist[v] <= 1 {
                    if got.is_ok() {
                        return Err(format!(
                            "kernel defined at distance {} ({v} -> {d})",
                            dist[v]
                        ));
                    }
                    continue;
                }
                let closer: Vec<usize> = adj[v]
                    .iter()
                    .copied()
                    .filter(|&w| dist[w] + 1 == dist[v])
                    .collect();
                let want: Vec<(NodeId, f64)> = closer
                    .iter()
                    .map(|&w| (NodeId(w), 1.0 / closer.len() as f64))
                    .collect();
                if got.map_err(|e| e.to_string())? != want {
                    return Err(format!("kernel mismatch at {v} -> {d}"));
                }
                pairs += 1;
            }
        }
    }
    Ok(format!("{pairs} routed pairs agree exactly"))
}

/// 2. Time-average queue length of a single M/M/1 server.
fn mm1() -> Check {
    let exp = config("path2_mm1.json");
    let deviation = |seed: u64| -> Result<f64, String> {
        let mut s = NetworkState::init(&exp.model, 1, &exp.initial, seed, SimOptions::default())
            .map_err(|e| e.to_string())?;
        s.run(exp.config.horizon, &[]).map_err(|e| e.to_string())?;
        let p = s.time_average_lengths(NodeId(0));
        Ok((0..=5)
            .map(|k| (p[k] - 0.5f64.powi(k as i32 + 1)).abs())
            .fold(0.0, f64::max))
    };
    let worst = deviation(exp.config.seed)?;
    let sweep: Vec<f64> = (0..100).map(deviation).collect::<Result<_, _>>()?;
    let rate = sweep.iter().filter(|&&d| d < 0.02).count();
    ensure(
        worst < 0.02,
        format!("max |P(l=k) - (1-rho) rho^k| over k<=5 = {worst:.4} (< 0.02); seeds 0..100 within tolerance: {rate}/100"),
    )
}

/// 3. ODE vs ensemble solver and vs the frozen-rate oracle at t = 5.
fn cross_solver() -> Check {
    let exp = config("path3.json");
    let (index, traj) =
        study::solve_ode(&exp, &[5.0], Execution::Parallel).map_err(|e| e.to_string())?;
    let mu = traj.last();
    let space = exp.config.observation;
    let pic = study::solve_picard(&exp, 5.0, 11, Execution::Parallel).map_err(|e| e.to_string())?;
    let snap = pic
        .snapshots
        .iter()
        .find(|s| (s.time - 5.0).abs() < 1e-9)
        .ok_or("no ensemble snapshot at t=5")?;
    let mut tv_pic: f64 = 0.0;
    for v in exp.model.graph.nodes() {
        tv_pic = tv_pic.max(
            tv_distance(&mu.descriptors(v, &index, space), &snap.nodes[v.0])
                .map_err(|e| e.to_string())?,
        );
    }
    let l = index.max_len();
    let oracle = common::frozen::solve(l, 5.0, 0.01);
    let w = l + 2;
    let mut tv_exp: f64 = 0.0;
    for v in 0..3 {
        let marg = mu.length_marginal(NodeId(v), &index);
        let mut s = (mu.leak(NodeId(v)) - oracle[v * w + l + 1]).abs();
        for n in 0..=l {
            s += (marg[n] - oracle[v * w + n]).abs();
        }
        tv_exp = tv_exp.max(0.5 * s);
    }
    let msg = format!(
        "TV(ode, ensemble R={}) = {tv_pic:.4} (< 0.05); TV(ode, matrix exponential) = {tv_exp:.2e} (< 1e-3)",
        exp.config.picard.replicas
    );
    ensure(tv_pic < 0.05 && tv_exp < 1e-3, msg)
}

/// 4. Seed-averaged empirical marginals approach the limit.
fn convergence() -> Check {
    let exp = config("path3.json");
    let opts = StudyOptions {
        seeds: 10,
        seed: exp.config.seed,
        bootstrap: 400,
        exec: Execution::Parallel,
    };
    let r = run_convergence_study(&exp, &[10, 100, 1000], &[1.0, 5.0], &opts)
        .map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    for t in &r.trends {
        let tv: Vec<f64> = [10, 100, 1000]
            .iter()
            .map(|&n| {
                r.rows
                    .iter()
                    .find(|x| x.n == n && x.time == t.time && x.node == "max")
                    .unwrap()
                    .tv
            })
            .collect();
        ok &= t.strictly_decreasing && t.separated && tv[2] < 0.05;
        parts.push(format!(
            "t={}: TV {:.4} > {:.4} > {:.4}, CIs separated {}",
            t.time, tv[0], tv[1], tv[2], t.separated
        ));
    }
    ensure(ok, parts.join("; "))
}

/// 5. Generator gap halves when N doubles; linear functions have no gap.
fn generator_convergence() -> Check {
    let exp = config("path3.json");
    let gaps = generator_check(&exp, 5, Execution::Parallel).map_err(|e| e.to_string())?;
    let series = |name: &str| {
        gaps.iter()
            .filter(|g| g.function == name)
            .collect::<Vec<_>>()
    };
    let quad = series("empty_pair");
    let ratios: Vec<f64> = quad
        .windows(2)
        .map(|w| w[0].mean_gap / w[1].mean_gap)
        .collect();
    let lin = series("linear")
        .iter()
        .map(|g| g.max_gap)
        .fold(0.0, f64::max);
    let ok = quad.len() == 4
        && quad[0].samples >= 100
        && ratios.iter().all(|r| (1.6..=2.4).contains(r))
        && lin <= 1e-12;
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    ensure(ok, format!("gap ratios N->2N for N=20,40,80: [{}] (in [1.6, 2.4]); linear max gap {lin:.1e} (<= 1e-12)", shown.join(", ")))
}

/// 6. Limit generator equals the derivative of F along the ODE drift.
fn representation() -> Check {
    let m = common::cycle4_two_class();
    let letters = m.reachable_letters([]);
    let idx = StateIndex::new(letters.clone(), 5, 1_000_000).map_err(|e| e.to_string())?;
    let sys = OdeSystem::new(&m, idx.clone(), OdeOptions::default()).map_err(|e| e.to_string())?;
    let law = InitialLaw {
        per_node: vec![
            QueueLaw::Geometric {
                p: 0.6,
                max_len: 4,
                letters: letters.clone(),
                age_mean: 0.0
            };
            4
        ],
    };
    let f = TestFunction::new(
        "mixed",
        vec![
            (NodeId(0), Observable::EmptyIndicator),
            (NodeId(1), Observable::LengthCapped { cap: 3 }),
            (NodeId(2), Observable::HeadLetter { letter: letters[0] }),
            (NodeId(3), Observable::HeadClass { class: ClassId(1) }),
        ],
        Polynomial {
            terms: vec![
                (1.0, vec![0, 1]),
                (-0.7, vec![2, 2, 3]),
                (0.4, vec![1]),
                (2.0, vec![3, 0, 1]),
            ],
        },
    )
    .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for s in 0..100 {
        let d = sample_atomic(&m, &law, 2 + s as usize % 9, 31, s);
        let atoms: Vec<_> = d.iter().map(|x| x.atoms.clone()).collect();
        let mu = TruncatedMeasure::from_atoms(&atoms, &idx).map_err(|e| e.to_string())?;
        let g = from_truncated(&sys.drift(&mu), &idx);
        let a = omega_limit(&m, &f, &d).map_err(|e| e.to_string())?;
        let b = frechet(&m, &f, &d, &g).map_err(|e| e.to_string())?;
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-9, format!("max |limit generator - derivative along drift| over 100 measures = {worst:.2e} (<= 1e-9)"))
}

/// 7. Fixed-point iteration contracts on short windows with Erlang services.
fn picard_contraction() -> Check {
    let exp = config("path3_erlang.json");
    let m = &exp.model;
    let s = exp.config.picard;
    let ft = m.hazard_bound() * s.window;
    let ens = NodeEnsemble::sample(m, &exp.initial, s.replicas, 17).map_err(|e| e.to_string())?;
    let keys = flow_keys(m, &exp.initial);
    let opts = study::picard_options(&exp, Execution::Parallel);
    let sol = windowed_solve(
        m,
        &ens,
        &keys,
        exp.config.horizon,
        s.window,
        s.tol,
        &opts,
        23,
    )
    .map_err(|e| e.to_string())?;
    let mut worst_ratio: f64 = 0.0;
    let mut checked = 0;
    let mut worst_excess = f64::NEG_INFINITY;
    for w in &sol.windows {
        let ratios = w.ratios();
        for (k, d) in w.distances.iter().take(ratios.len()).enumerate() {
            if *d > w.noise_floor {
                worst_ratio = worst_ratio.max(ratios[k]);
                checked += 1;
            }
        }
        let bound = s.tol + 3.0 * w.residual_noise_floor.unwrap_or(0.0);
        worst_excess = worst_excess.max(w.residual.unwrap_or(f64::INFINITY) - bound);
    }
    let residual_ok = worst_excess <= 0.0;
    let msg = format!(
        "hazard bound x window = {ft:.3}; {} windows; max ratio above noise floor {worst_ratio:.3} over {checked} steps (< 0.8); worst residual minus (tol + 3 se) = {worst_excess:.2e} (<= 0)",
        sol.windows.len()
    );
    ensure(
        ft <= 0.1 + 1e-12 && checked > 0 && worst_ratio < 0.8 && residual_ok,
        msg,
    )
}

/// 8. Linearized flow against finite differences.
fn frechet_differentiability() -> Check {
    let m = common::path3_exp();
    let idx =
        StateIndex::for_model(&m, &InitialLaw::empty(3), 20, 100_000).map_err(|e| e.to_string())?;
    let sys = OdeSystem::new(&m, idx.clone(), OdeOptions::default()).map_err(|e| e.to_string())?;
    let mu0 = TruncatedMeasure::all_empty(3, &idx);
    let letters = m.reachable_letters([]);
    let init = InitialLaw {
        per_node: vec![
            QueueLaw::Geometric {
                p: 0.5,
                max_len: 6,
                letters,
                age_mean: 0.0
            };
            3
        ],
    };
    let nu0 = TruncatedMeasure::from_initial(&init, &idx).map_err(|e| e.to_string())?;
    let shift = |base: &TruncatedMeasure, h: &[f64], eps: f64| {
        TruncatedMeasure::from_raw(
            base.words(),
            base.as_slice()
                .iter()
                .zip(h)
                .map(|(a, b)| a + eps * b)
                .collect(),
        )
        .unwrap()
    };
    let h0: Vec<f64> = nu0
        .as_slice()
        .iter()
        .zip(mu0.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    let h0m = TruncatedMeasure::from_raw(mu0.words(), h0.clone()).map_err(|e| e.to_string())?;
    let (t, dt) = (1.0, 0.01);
    let lin = sys
        .sensitivity(&mu0, &h0m, t, dt)
        .map_err(|e| e.to_string())?;
    let base = sys
        .integrate_at(&mu0, &[t], dt)
        .map_err(|e| e.to_string())?;
    let h_t = lin
        .h
        .last()
        .ok_or("empty sensitivity")?
        .0
        .as_slice()
        .to_vec();
    let remainder = |eps: f64| -> Result<f64, String> {
        let p = sys
            .integrate_at(&shift(&mu0, &h0, eps), &[t], dt)
            .map_err(|e| e.to_string())?;
        Ok(p.last().l1_distance(&shift(base.last(), &h_t, eps)))
    };
    let mut ratios = Vec::new();
    for eps in [1e-2, 1e-3] {
        ratios.push(remainder(eps)? / remainder(eps / 2.0)?);
    }
    let ok = ratios.iter().all(|r| (3.0..=5.0).contains(r));
    ensure(
        ok,
        format!(
            "remainder ratios under halving: eps=1e-2 {:.3}, eps=1e-3 {:.3} (in [3, 5])",
            ratios[0], ratios[1]
        ),
    )
}

fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (
        m,
        (x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt(),
    )
}

/// 9. Mass, customer count, swap rate and symmetry checks.
fn conservation() -> Check {
    let mut parts = Vec::new();
    let mut ok = true;

    let m = common::cycle4_two_class();
    let letters = m.reachable_letters([]);
    let init = InitialLaw {
        per_node: vec![
            QueueLaw::Geometric {
                p: 0.3,
                max_len: 2,
                letters: letters.clone(),
                age_mean: 0.0
            };
            4
        ],
    };
    let idx = StateIndex::for_model(&m, &init, 4, 100_000).map_err(|e| e.to_string())?;
    let sys = OdeSystem::new(
        &m,
        idx.clone(),
        OdeOptions {
            leak_tol: 0.5,
            ..OdeOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let traj = sys
        .integrate(
            &TruncatedMeasure::from_initial(&init, &idx).unwrap(),
            3.0,
            0.02,
        )
        .map_err(|e| e.to_string())?;
    let drift = traj
        .states
        .iter()
        .flat_map(|s| (0..4).map(move |v| (s.mass(NodeId(v)) - 1.0).abs()))
        .fold(0.0, f64::max);
    ok &= drift <= 1e-8;
    parts.push(format!("mass drift {drift:.1e}"));

    let geo = InitialLaw {
        per_node: vec![
            QueueLaw::Geometric {
                p: 0.5,
                max_len: 5,
                letters,
                age_mean: 0.2
            };
            4
        ],
    };
    let mut s =
        NetworkState::init(&m, 12, &geo, 3, SimOptions::default()).map_err(|e| e.to_string())?;
    let start = s.customers_in_system() as i64;
    let mut mismatches = 0;
    for _ in 0..50_000 {
        let Some((dt, ev)) = s.next_event() else {
            break;
        };
        s.apply_event(dt, ev).map_err(|e| e.to_string())?;
        let c = s.counters();
        if s.customers_in_system() as i64 != start + c.arrivals as i64 - c.exits as i64 {
            mismatches += 1;
        }
    }
    ok &= mismatches == 0;
    parts.push(format!("customer count mismatches {mismatches}"));

    let g = Graph::build(&GraphSpec::path(3, 0.5)).unwrap();
    let quiet = Model::uniform(
        g,
        ArrivalTable::new(3),
        ServiceLaw::exponential(1.0),
        Discipline::Fifo,
    )
    .unwrap();
    let want: f64 = quiet
        .graph
        .nodes()
        .map(|v| quiet.graph.swap_rate_at(v))
        .sum::<f64>()
        / 3.0;
    for n in [10usize, 100] {
        let mut s = NetworkState::init(
            &quiet,
            n,
            &InitialLaw::empty(3),
            40 + n as u64,
            SimOptions::default(),
        )
        .unwrap();
        s.run(200.0, &[]).map_err(|e| e.to_string())?;
        let swaps = s.counters().swaps as f64;
        let exposure = (3 * n) as f64 * 200.0;
        let (rate, se) = (2.0 * swaps / exposure, 2.0 * swaps.sqrt() / exposure);
        ok &= (rate - want).abs() <= 3.0 * se;
        parts.push(format!(
            "N={n} swaps/server {rate:.4} vs {want:.4} (3 se {:.4})",
            3.0 * se
        ));
    }

    let g = Graph::build(&GraphSpec::cycle(4, 0.4)).unwrap();
    let mut arr = ArrivalTable::new(4);
    for v in 0..4 {
        arr.add(ClassId(0), NodeId(v), NodeId((v + 2) % 4), 0.6);
    }
    let sym = Model::uniform(g, arr, ServiceLaw::erlang(2, 4.0), Discipline::Fifo).unwrap();
    let mut empty = vec![Vec::new(); 4];
    for seed in 0..20 {
        let mut s = NetworkState::init(
            &sym,
            50,
            &InitialLaw::empty(4),
            500 + seed,
            SimOptions::default(),
        )
        .unwrap();
        s.run(3.0, &[]).map_err(|e| e.to_string())?;
        for (v, e) in empty.iter_mut().enumerate() {
            e.push(s.empirical_measure(NodeId(v)).prob_len(0));
        }
    }
    let (m0, s0) = mean_se(&empty[0]);
    let worst = empty[1..]
        .iter()
        .map(|e| {
            let (mv, sv) = mean_se(e);
            (mv - m0).abs() / (3.0 * (s0 * s0 + sv * sv).sqrt())
        })
        .fold(0.0, f64::max);
    ok &= worst <= 1.0;
    parts.push(format!("symmetric nodes: worst gap {worst:.2} x (3 se)"));
    ensure(ok, parts.join("; "))
}

type Criterion = (&'static str, Duration, fn() -> Check);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("routing oracle", Duration::from_secs(1), routing_oracle),
        ("M/M/1 closed form", Duration::from_secs(10), mm1),
        (
            "cross-solver agreement",
            Duration::from_secs(120),
            cross_solver,
        ),
        (
            "convergence at desk scale",
            Duration::from_secs(600),
            convergence,
        ),
        (
            "generator convergence",
            Duration::from_secs(60),
            generator_convergence,
        ),
        (
            "representation identity",
            Duration::from_secs(10),
            representation,
        ),
        (
            "fixed-point contraction",
            Duration::from_secs(300),
            picard_contraction,
        ),
        (
            "Frechet differentiability",
            Duration::from_secs(60),
            frechet_differentiability,
        ),
        ("conservation suite", Duration::from_secs(120), conservation),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let clock = Instant::now();
        let result = check();
        let elapsed = clock.elapsed();
        let in_time = elapsed <= *budget;
        let (pass, detail) = match result {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {}. {name}: {detail} [{:.2} s, budget {} s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
