use std::path::Path;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use swapnet::generators::generator_gap;
use swapnet::harness::study::{self, StudyOptions};
use swapnet::harness::{load_config, run_convergence_study, Experiment};
use swapnet::picard::{departure_rates, flow_keys, NodeEnsemble, RateGrid};
use swapnet::Execution;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn config(name: &str) -> Experiment {
    load_config(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../configs")
            .join(name),
    )
    .unwrap()
}

fn ode(c: &mut Criterion) {
    let exp = config("path3.json");
    let mut g = c.benchmark_group("ode_integrate");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| study::solve_ode(&exp, &[5.0], mode).unwrap())
        });
    }
    g.finish();
}

fn picard(c: &mut Criterion) {
    let exp = config("path3_erlang.json");
    let s = exp.config.picard;
    let ens = NodeEnsemble::sample(&exp.model, &exp.initial, s.replicas, 1).unwrap();
    let keys = flow_keys(&exp.model, &exp.initial);
    let bins = (s.window / s.step).round() as usize;
    let lambda = RateGrid::zeros(keys, s.step, bins);
    let mut g = c.benchmark_group("picard_departure_rates");
    g.sample_size(10);
    for (name, mode) in MODES {
        let opts = study::picard_options(&exp, mode);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| departure_rates(&exp.model, &ens, &lambda, &opts, 2).unwrap())
        });
    }
    g.finish();
}

fn generators(c: &mut Criterion) {
    let exp = config("path3.json");
    let f = &exp.functions[0];
    let sampler = &exp.sampler;
    let mut g = c.benchmark_group("generator_gap");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                generator_gap(&exp.model, f, &[20, 40, 80, 160], sampler, 100, 3, mode).unwrap()
            })
        });
    }
    g.finish();
}

fn convergence(c: &mut Criterion) {
    let exp = config("path3.json");
    let mut g = c.benchmark_group("convergence_study");
    g.sample_size(10);
    for (name, mode) in MODES {
        let opts = StudyOptions {
            seeds: 10,
            seed: 4,
            bootstrap: 100,
            exec: mode,
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_convergence_study(&exp, &[10, 100, 1000], &[1.0, 5.0], &opts).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, ode, picard, generators, convergence);
criterion_main!(benches);
