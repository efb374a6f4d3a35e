use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use swapnet::harness::report::{self, write_json, ReportError};
use swapnet::harness::study::{self, generator_check, solve_ode, solve_picard, StudyOptions};
use swapnet::harness::{
    emit_report, load_config, run_convergence_study, ConfigError, Experiment, LimitMethod,
    StudyError,
};
use swapnet::Execution;

#[derive(Parser, Debug)]
#[command(
    name = "swapnet",
    version,
    about = "Mean-field queueing networks with swapping servers"
)]
struct Cli {
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Experiment config (JSON, schema 1).
    config: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Copy counts, replacing the config list.
    #[arg(long, value_delimiter = ',')]
    copies: Vec<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a config against every bound and print all violations.
    Validate(ConfigArg),
    /// Run the finite network once per copy count and write trajectories.
    Simulate(SweepArgs),
    /// Integrate the truncated forward equations (exponential services).
    SolveOde(ConfigArg),
    /// Solve the limit by windowed fixed-point iteration on an ensemble.
    SolvePicard(ConfigArg),
    /// Measure finite vs limit generator gaps on the configured functions.
    GeneratorCheck(ConfigArg),
    /// Convergence study of seed-averaged empirical marginals to the limit.
    Converge {
        #[command(flatten)]
        sweep: SweepArgs,
        /// Runs per copy count, replacing the config value.
        #[arg(long)]
        seeds: Option<usize>,
        /// Bootstrap resamples for the confidence intervals.
        #[arg(long, default_value_t = 400)]
        bootstrap: usize,
    },
    /// Write the greedy next-hop table.
    RouteTable(ConfigArg),
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(ConfigError::Io { .. }) => 1,
            CliError::Config(_) => 2,
            CliError::Study(e) if e.is_numerical() => 3,
            _ => 1,
        }
    }
}

struct Ctx {
    out: PathBuf,
    seed: Option<u64>,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn seed(&self, exp: &Experiment) -> u64 {
        self.seed.unwrap_or(exp.config.seed)
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        report::ensure_dir(&self.out)?;
        Ok(&self.out)
    }

    fn wrote(&self, files: &[PathBuf]) {
        for f in files {
            self.say(format!("wrote {}", f.display()));
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: cannot start {} threads: {e}", cli.threads);
            return ExitCode::from(1);
        }
    }
    let ctx = Ctx {
        out: cli.out,
        seed: cli.seed,
        quiet: cli.quiet,
    };
    match run(&ctx, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Config(ConfigError::Invalid(vs)) => {
                    eprintln!("error: config rejected with {} violation(s)", vs.len());
                    for v in vs {
                        eprintln!("  {v}");
                    }
                }
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(ctx: &Ctx, command: Command) -> Result<(), CliError> {
    match command {
        Command::Validate(a) => {
            let exp = load_config(&a.config)?;
            let m = &exp.model;
            ctx.say(format!(
                "ok: {} ({} nodes, {} edges, {} classes, limit solver {:?})",
                a.config.display(),
                m.node_count(),
                m.graph.edges().len(),
                m.class_count(),
                LimitMethod::for_experiment(&exp)
            ));
            Ok(())
        }
        Command::Simulate(s) => simulate(ctx, s),
        Command::SolveOde(a) => ode(ctx, &a.config),
        Command::SolvePicard(a) => picard(ctx, &a.config),
        Command::GeneratorCheck(a) => generators(ctx, &a.config),
        Command::Converge {
            sweep,
            seeds,
            bootstrap,
        } => converge(ctx, sweep, seeds, bootstrap),
        Command::RouteTable(a) => {
            let exp = load_config(&a.config)?;
            let f = report::write_routes(ctx.out_dir()?.join("routes.csv"), &exp.model.graph)?;
            ctx.wrote(&[f]);
            Ok(())
        }
    }
}

fn copies(exp: &Experiment, flag: Vec<usize>) -> Result<Vec<usize>, CliError> {
    let c = if flag.is_empty() {
        exp.config.copies.clone()
    } else {
        flag
    };
    if c.is_empty() || c.contains(&0) {
        return Err(CliError::Usage(
            "give positive copy counts in the config or with --copies".into(),
        ));
    }
    Ok(c)
}

/// Snapshot times with the horizon appended.
fn sim_times(exp: &Experiment) -> Vec<f64> {
    let mut t = exp.config.snapshot_times.clone();
    t.push(exp.config.horizon);
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

fn simulate(ctx: &Ctx, s: SweepArgs) -> Result<(), CliError> {
    let exp = load_config(&s.cfg.config)?;
    let ns = copies(&exp, s.copies)?;
    let seed = ctx.seed(&exp);
    let times = sim_times(&exp);
    let clock = Instant::now();
    let runs = swapnet::exec::map_indexed(Execution::Parallel, ns.len(), |i| {
        let rs = study::run_seed(seed, ns[i], 0);
        study::simulate(&exp, ns[i], &times, rs).map(|snaps| (ns[i], rs, snaps))
    });
    let runs: Vec<_> = runs.into_iter().collect::<Result<_, _>>()?;
    let elapsed = clock.elapsed().as_secs_f64();
    let dir = ctx.out_dir()?;
    let mut files = vec![report::write_trajectories(
        dir.join("trajectories.csv"),
        &exp.model.graph,
        exp.config.observation.cap,
        &runs,
    )?];
    let summary: Vec<_> = runs
        .iter()
        .map(|(n, rs, snaps)| {
            let last = snaps.last();
            json!({
                "n": n,
                "seed": rs,
                "final_time": last.map(|s| s.time),
                "customers_in_system": last.map(|s| s.customers_in_system),
                "counters": last.map(|s| s.counters),
            })
        })
        .collect();
    files.push(write_json(
        dir.join("simulate_summary.json"),
        &json!({ "config": exp.config.name, "runs": summary }),
    )?);
    files.push(write_json(
        dir.join("timings.json"),
        &json!([{ "label": "simulate", "seconds": elapsed }]),
    )?);
    for (n, _, snaps) in &runs {
        if let Some(last) = snaps.last() {
            ctx.say(format!(
                "N={n}: {} events, {} customers at t={}",
                last.counters.total(),
                last.customers_in_system,
                last.time
            ));
        }
    }
    ctx.wrote(&files);
    Ok(())
}

fn ode(ctx: &Ctx, path: &Path) -> Result<(), CliError> {
    let exp = load_config(path)?;
    let times = sim_times(&exp);
    let (index, traj) = solve_ode(&exp, &times, Execution::Parallel)?;
    let space = exp.config.observation;
    let marginals: Vec<_> = times
        .iter()
        .zip(&traj.states)
        .map(|(&t, mu)| {
            (
                t,
                exp.model
                    .graph
                    .nodes()
                    .map(|v| mu.descriptors(v, &index, space))
                    .collect(),
            )
        })
        .collect();
    let dir = ctx.out_dir()?;
    let mut files = vec![report::write_marginals(
        dir.join("ode_marginals.csv"),
        &exp.model.graph,
        &exp.model.class_names,
        &marginals,
    )?];
    let last = traj.last();
    let leaks: Vec<f64> = exp.model.graph.nodes().map(|v| last.leak(v)).collect();
    files.push(write_json(
        dir.join("ode_summary.json"),
        &json!({ "config": exp.config.name, "dimension": index.len(), "times": times, "audit": traj.audit, "final_leak": leaks }),
    )?);
    ctx.say(format!(
        "{} words per node, {} steps, {} clamped entries",
        index.len(),
        traj.audit.steps,
        traj.audit.clamped
    ));
    ctx.wrote(&files);
    Ok(())
}

fn picard(ctx: &Ctx, path: &Path) -> Result<(), CliError> {
    let exp = load_config(path)?;
    let sol = solve_picard(
        &exp,
        exp.config.horizon,
        ctx.seed(&exp),
        Execution::Parallel,
    )?;
    let dir = ctx.out_dir()?;
    let mut files = report::write_picard(dir, &exp.model.graph, &exp.model.class_names, &sol)?;
    let marginals: Vec<_> = sol
        .snapshots
        .iter()
        .map(|s| (s.time, s.nodes.clone()))
        .collect();
    files.push(report::write_marginals(
        dir.join("picard_marginals.csv"),
        &exp.model.graph,
        &exp.model.class_names,
        &marginals,
    )?);
    let windows: Vec<_> = sol
        .windows
        .iter()
        .map(|w| {
            json!({
                "iterations": w.distances.len(),
                "distances": w.distances,
                "noise_floor": w.noise_floor,
                "converged": w.converged,
                "residual": w.residual,
                "residual_noise_floor": w.residual_noise_floor,
            })
        })
        .collect();
    files.push(write_json(
        dir.join("picard_summary.json"),
        &json!({ "config": exp.config.name, "windows": windows }),
    )?);
    let unconverged = sol.windows.iter().filter(|w| !w.converged).count();
    ctx.say(format!(
        "{} windows, {unconverged} stopped at the iteration cap",
        sol.windows.len()
    ));
    ctx.wrote(&files);
    Ok(())
}

fn generators(ctx: &Ctx, path: &Path) -> Result<(), CliError> {
    let exp = load_config(path)?;
    let gaps = generator_check(&exp, ctx.seed(&exp), Execution::Parallel)?;
    let dir = ctx.out_dir()?;
    let mut files = vec![report::write_gaps(dir.join("generator_gaps.csv"), &gaps)?];
    let ratios: Vec<_> = gaps
        .windows(2)
        .filter(|w| w[0].function == w[1].function)
        .map(|w| json!({ "function": w[0].function, "from": w[0].n, "to": w[1].n, "ratio": w[0].mean_gap / w[1].mean_gap }))
        .collect();
    files.push(write_json(
        dir.join("generator_summary.json"),
        &json!({ "config": exp.config.name, "gaps": gaps, "ratios": ratios }),
    )?);
    for g in &gaps {
        ctx.say(format!(
            "{} N={}: mean gap {:.3e}, max gap {:.3e}",
            g.function, g.n, g.mean_gap, g.max_gap
        ));
    }
    ctx.wrote(&files);
    Ok(())
}

fn converge(
    ctx: &Ctx,
    s: SweepArgs,
    seeds: Option<usize>,
    bootstrap: usize,
) -> Result<(), CliError> {
    let exp = load_config(&s.cfg.config)?;
    let ns = copies(&exp, s.copies)?;
    let mut opts = StudyOptions::from_experiment(&exp);
    opts.seed = ctx.seed(&exp);
    opts.bootstrap = bootstrap;
    if let Some(k) = seeds {
        opts.seeds = k;
    }
    let report = run_convergence_study(&exp, &ns, &exp.times(), &opts)?;
    for r in report.rows.iter().filter(|r| r.node == "max") {
        ctx.say(format!(
            "N={} t={}: max TV {:.4} [{:.4}, {:.4}]",
            r.n, r.time, r.tv, r.ci_low, r.ci_high
        ));
    }
    for t in &report.trends {
        ctx.say(format!(
            "t={}: decreasing {}, separated {}",
            t.time, t.strictly_decreasing, t.separated
        ));
    }
    let files = emit_report(&report, ctx.out_dir()?)?;
    ctx.wrote(&files);
    Ok(())
}
