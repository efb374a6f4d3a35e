//! Fixed-point solver for the limit dynamics with general service laws.
//!
//! Each node is replaced by an ensemble of `R` independent replica queues fed
//! by Poisson arrivals whose transit part follows candidate rate functions
//! `λ`. The departures of the ensembles define new rate functions `b = ψ(λ)`;
//! iterating `ψ` on a short window converges to the self-consistent rates.
//! Server swaps replace a replica's queue with a uniform draw from the
//! neighbor ensemble, frozen at the start of the current grid bin.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use ordered_float::OrderedFloat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{derive_seed, for_each_mut, stream_rng, Execution};
use crate::model::{InitialLaw, Model, ModelError};
use crate::network::{DescriptorDist, DescriptorSpace};
use crate::queue::{ClassId, Customer, QueueError, QueueState};
use crate::topology::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PicardError {
    #[error("rate {value} on {key:?} is outside [0, {bound}]")]
    RateBoundExceeded {
        key: FlowKey,
        value: f64,
        bound: f64,
    },
    #[error("ensemble of {replicas} replicas is below the floor {min}")]
    EnsembleTooSmall { replicas: usize, min: usize },
    #[error("rate grids differ in shape")]
    GridMismatch,
    #[error("no contraction: distance ratios {ratios:?} stayed >= 1 above the noise floor (shorten the window or add replicas)")]
    NoContraction { iteration: usize, ratios: Vec<f64> },
    #[error("window too long: {what} = {value} exceeds {max}")]
    WindowTooLong {
        what: &'static str,
        value: f64,
        max: f64,
    },
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("window {window}: {source}")]
    WindowFailed {
        window: usize,
        source: Box<PicardError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Queue(#[from] QueueError),
}

/// A stream of transit customers: served at `from`, moving to `to` with
/// class `class` (after the class transition) and destination `dest`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub from: NodeId,
    pub to: NodeId,
    pub class: ClassId,
    pub dest: NodeId,
}

/// Piecewise-linear rate functions on the knots `0, Δt, ..., bins·Δt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateGrid {
    pub step: f64,
    pub bins: usize,
    pub series: BTreeMap<FlowKey, Vec<f64>>,
}

impl RateGrid {
    pub fn zeros(keys: impl IntoIterator<Item = FlowKey>, step: f64, bins: usize) -> Self {
        RateGrid {
            step,
            bins,
            series: keys.into_iter().map(|k| (k, vec![0.0; bins + 1])).collect(),
        }
    }

    pub fn horizon(&self) -> f64 {
        self.step * self.bins as f64
    }

    pub fn knot_time(&self, i: usize) -> f64 {
        self.step * i as f64
    }

    pub fn get(&self, key: &FlowKey) -> Option<&[f64]> {
        self.series.get(key).map(Vec::as_slice)
    }

    /// Value at time `t` (linear between knots, zero for absent keys).
    pub fn value(&self, key: &FlowKey, t: f64) -> f64 {
        match self.series.get(key) {
            None => 0.0,
            Some(v) => interpolate(v, self.step, t),
        }
    }

    fn same_shape(&self, other: &RateGrid) -> bool {
        self.bins == other.bins
            && (self.step - other.step).abs() <= 1e-12 * self.step.abs().max(1.0)
            && self.series.keys().eq(other.series.keys())
    }
}

fn interpolate(v: &[f64], step: f64, t: f64) -> f64 {
    let x = (t / step).clamp(0.0, (v.len() - 1) as f64);
    let i = (x.floor() as usize).min(v.len().saturating_sub(2));
    if v.len() == 1 {
        return v[0];
    }
    let f = x - i as f64;
    v[i] * (1.0 - f) + v[i + 1] * f
}

/// `Σ_keys ∫ |λ¹ − λ²| dt`, integrating the piecewise-linear gap exactly.
pub fn rate_distance(a: &RateGrid, b: &RateGrid) -> Result<f64, PicardError> {
    if !a.same_shape(b) {
        return Err(PicardError::GridMismatch);
    }
    let mut total = 0.0;
    for (k, x) in &a.series {
        let y = &b.series[k];
        for i in 0..a.bins {
            let (d0, d1) = (x[i] - y[i], x[i + 1] - y[i + 1]);
            total += if d0 * d1 >= 0.0 {
                0.5 * a.step * (d0.abs() + d1.abs())
            } else {
                0.5 * a.step * (d0 * d0 + d1 * d1) / (d0.abs() + d1.abs())
            };
        }
    }
    Ok(total)
}

/// L1-nearest sequence to `f` with `|y_i − y_{i−1}| ≤ c` and `0 ≤ y_i ≤ cap`.
pub fn lipschitz_project_series(f: &[f64], c: f64, cap: f64) -> Vec<f64> {
    let n = f.len();
    if n == 0 {
        return Vec::new();
    }
    let g: Vec<f64> = f.iter().map(|x| x.clamp(0.0, cap)).collect();
    // slope trick: max-heap of left breakpoints, min-heap of right ones, each
    // with a lazy shift
    let mut left: BinaryHeap<OrderedFloat<f64>> = BinaryHeap::new();
    let mut right: BinaryHeap<Reverse<OrderedFloat<f64>>> = BinaryHeap::new();
    let (mut shift_l, mut shift_r) = (0.0, 0.0);
    let mut argmin = Vec::with_capacity(n);
    for (i, &a) in g.iter().enumerate() {
        if i > 0 {
            shift_l -= c;
            shift_r += c;
        }
        // add (x − a)⁺
        left.push(OrderedFloat(a - shift_l));
        let top = left.pop().unwrap().0 + shift_l;
        right.push(Reverse(OrderedFloat(top - shift_r)));
        // add (a − x)⁺
        right.push(Reverse(OrderedFloat(a - shift_r)));
        let bottom = right.pop().unwrap().0 .0 + shift_r;
        left.push(OrderedFloat(bottom - shift_l));
        let lo = left.peek().map_or(f64::NEG_INFINITY, |x| x.0 + shift_l);
        let hi = right.peek().map_or(f64::INFINITY, |x| x.0 .0 + shift_r);
        argmin.push(a.clamp(lo, hi.max(lo)));
    }
    let mut y = vec![0.0; n];
    y[n - 1] = argmin[n - 1];
    for i in (0..n - 1).rev() {
        y[i] = argmin[i].clamp(y[i + 1] - c, y[i + 1] + c);
    }
    y.iter().map(|x| x.clamp(0.0, cap)).collect()
}

/// Projects every series onto slopes within `±lip` and values in `[0, cap]`.
pub fn lipschitz_project(raw: &RateGrid, lip: f64, cap: f64) -> RateGrid {
    let c = lip * raw.step;
    RateGrid {
        step: raw.step,
        bins: raw.bins,
        series: raw
            .series
            .iter()
            .map(|(k, v)| (*k, lipschitz_project_series(v, c, cap)))
            .collect(),
    }
}

/// All transit streams the model can generate between adjacent nodes.
pub fn flow_keys(model: &Model, init: &InitialLaw) -> Vec<FlowKey> {
    let mut keys = BTreeSet::new();
    for l in model.reachable_letters(init.letters()) {
        for v in model.graph.nodes() {
            if model.graph.dist(v, l.dest) <= 1 {
                continue;
            }
            for (u, _) in model
                .graph
                .routing_kernel(v, l.dest)
                .expect("two hops away")
            {
                if let Ok(class) = model.transitions.get(l.class, v, u) {
                    keys.insert(FlowKey {
                        from: v,
                        to: u,
                        class,
                        dest: l.dest,
                    });
                }
            }
        }
    }
    keys.into_iter().collect()
}

/// `R` replica queues per node, with attained service and requirements.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEnsemble {
    pub replicas: Vec<Vec<QueueState>>,
}

impl NodeEnsemble {
    pub fn sample(
        model: &Model,
        init: &InitialLaw,
        replicas: usize,
        seed: u64,
    ) -> Result<Self, PicardError> {
        init.validate(model.node_count())?;
        let mut rng = stream_rng(seed, u64::MAX);
        let replicas = model
            .graph
            .nodes()
            .map(|v| {
                (0..replicas)
                    .map(|_| {
                        let mut q = init.at(v).sample(&mut rng);
                        for c in &mut q.customers {
                            c.requirement =
                                Some(model.law(c.class, v).sample_residual(c.age, &mut rng));
                        }
                        q
                    })
                    .collect()
            })
            .collect();
        Ok(NodeEnsemble { replicas })
    }

    pub fn replica_count(&self) -> usize {
        self.replicas.first().map_or(0, Vec::len)
    }

    pub fn descriptors(&self, v: NodeId, space: DescriptorSpace) -> DescriptorDist {
        DescriptorDist::from_queues(space, &self.replicas[v.0])
    }
}

/// Per-replica averages at one node, split into batches.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowCounters {
    pub in_system: f64,
    pub external_arrivals: f64,
    pub transit_arrivals: f64,
    pub transit_departures: f64,
    pub exits: f64,
}

impl FlowCounters {
    fn add(&mut self, o: &FlowCounters) {
        self.in_system += o.in_system;
        self.external_arrivals += o.external_arrivals;
        self.transit_arrivals += o.transit_arrivals;
        self.transit_departures += o.transit_departures;
        self.exits += o.exits;
    }

    fn scale(&mut self, f: f64) {
        self.in_system *= f;
        self.external_arrivals *= f;
        self.transit_arrivals *= f;
        self.transit_departures *= f;
        self.exits *= f;
    }
}

/// Ensemble observation at one knot. Counters are cumulative from the start
/// of the run and given per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSnapshot {
    pub time: f64,
    pub nodes: Vec<DescriptorDist>,
    pub batches: Vec<Vec<FlowCounters>>,
}

impl EnsembleSnapshot {
    /// Mean and standard error over batches of `f` applied to per-node
    /// counters.
    pub fn batch_stat(&self, f: impl Fn(&[FlowCounters]) -> f64) -> (f64, f64) {
        mean_se(&self.batches.iter().map(|b| f(b)).collect::<Vec<_>>())
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepartureEstimate {
    /// Projected knot estimates, `ψ(λ)`.
    pub rates: RateGrid,
    /// Knot estimates before projection.
    pub raw: RateGrid,
    /// Batch-means standard error of the raw knot estimates.
    pub se: RateGrid,
    /// `∫ se dt` summed over streams.
    pub noise_floor: f64,
    pub snapshots: Vec<EnsembleSnapshot>,
    pub final_ensemble: NodeEnsemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    pub step: f64,
    pub batches: usize,
    pub min_replicas: usize,
    /// Slope bound for rate functions; `None` uses the model default.
    pub lipschitz: Option<f64>,
    pub max_hazard_window: f64,
    pub max_swap_window: f64,
    pub max_iter: usize,
    /// Re-evaluate the fixed point with an independent seed.
    pub verify: bool,
    pub observation: DescriptorSpace,
    pub exec: Execution,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            step: 0.05,
            batches: 10,
            min_replicas: 20,
            lipschitz: None,
            max_hazard_window: 1.0,
            max_swap_window: 1.0,
            max_iter: 30,
            verify: true,
            observation: DescriptorSpace::default(),
            exec: Execution::Parallel,
        }
    }
}

struct Replica {
    node: usize,
    batch: usize,
    queue: QueueState,
    next_arrival: f64,
    next_swap: f64,
    rng_arrival: ChaCha8Rng,
    rng_service: ChaCha8Rng,
    rng_swap: ChaCha8Rng,
    departures: Vec<f64>,
    counters: FlowCounters,
}

struct NodePlan {
    external: Vec<(ClassId, NodeId, f64)>,
    external_total: f64,
    incoming: Vec<usize>,
    envelope: f64,
    swaps: Vec<(usize, f64)>,
    swap_total: f64,
}

struct Plan<'a> {
    model: &'a Model,
    keys: Vec<FlowKey>,
    nodes: Vec<NodePlan>,
    /// `routes[v]`: letter -> [(key index, probability)]; missing means exit.
    routes: Vec<RouteMap>,
}

type RouteMap = BTreeMap<(ClassId, NodeId), Vec<(usize, f64)>>;

impl<'a> Plan<'a> {
    fn new(model: &'a Model, keys: Vec<FlowKey>) -> Self {
        let bound = model.hazard_bound();
        let nodes = model
            .graph
            .nodes()
            .map(|v| {
                let external: Vec<_> = model
                    .arrivals
                    .at(v)
                    .iter()
                    .map(|s| (s.class, s.dest, s.rate))
                    .collect();
                let incoming: Vec<usize> = keys
                    .iter()
                    .enumerate()
                    .filter(|(_, k)| k.to == v)
                    .map(|(i, _)| i)
                    .collect();
                let swaps: Vec<(usize, f64)> = model
                    .graph
                    .neighbors(v)
                    .iter()
                    .map(|&(u, e)| (u.0, model.graph.edges()[e].beta))
                    .filter(|(_, b)| *b > 0.0)
                    .collect();
                NodePlan {
                    external_total: external.iter().map(|e| e.2).sum(),
                    external,
                    envelope: incoming.len() as f64 * bound,
                    incoming,
                    swap_total: swaps.iter().map(|s| s.1).sum(),
                    swaps,
                }
            })
            .collect();
        let mut routes = vec![BTreeMap::new(); model.node_count()];
        for (i, k) in keys.iter().enumerate() {
            let from_class = model
                .class_names
                .iter()
                .enumerate()
                .map(|(c, _)| ClassId(c))
                .filter(|&c| model.transitions.get(c, k.from, k.to) == Ok(k.class));
            for c in from_class {
                let p = model
                    .graph
                    .routing_kernel(k.from, k.dest)
                    .expect("flow keys are two hops from their destination")
                    .into_iter()
                    .find(|(u, _)| *u == k.to)
                    .map_or(0.0, |(_, p)| p);
                routes[k.from.0]
                    .entry((c, k.dest))
                    .or_insert_with(Vec::new)
                    .push((i, p));
            }
        }
        Plan {
            model,
            keys,
            nodes,
            routes,
        }
    }
}

fn exp_time<R: Rng>(rng: &mut R, rate: f64) -> f64 {
    if rate > 0.0 {
        let e: f64 = Exp1.sample(rng);
        e / rate
    } else {
        f64::INFINITY
    }
}

impl Replica {
    /// Runs the replica over `[t0, t1]` under arrival rates `lambda`.
    fn run_bin(
        &mut self,
        plan: &Plan,
        lambda: &RateGrid,
        snapshot: &[Vec<QueueState>],
        t0: f64,
        t1: f64,
    ) {
        let model = plan.model;
        let v = NodeId(self.node);
        let np = &plan.nodes[self.node];
        let disc = model.discipline(v);
        let rate_max = np.external_total + np.envelope;
        let mut now = t0;
        if self.next_arrival < t0 {
            self.next_arrival = t0 + exp_time(&mut self.rng_arrival, rate_max);
        }
        if self.next_swap < t0 {
            self.next_swap = t0 + exp_time(&mut self.rng_swap, np.swap_total);
        }
        self.departures.iter_mut().for_each(|d| *d = 0.0);
        loop {
            let served = self.queue.select_in_service(disc).ok();
            let t_done = served.map_or(f64::INFINITY, |i| {
                now + self.queue.customers[i].remaining().unwrap_or(0.0).max(0.0)
            });
            let t_next = t_done.min(self.next_arrival).min(self.next_swap);
            if t_next > t1 {
                self.queue.advance(t1 - now, disc);
                break;
            }
            self.queue.advance(t_next - now, disc);
            now = t_next;
            if t_next == t_done {
                let i = served.unwrap();
                let c = self.queue.customers.remove(i);
                match plan.routes[self.node].get(&(c.class, c.dest)) {
                    Some(targets) if model.graph.dist(v, c.dest) > 1 => {
                        for &(k, p) in targets {
                            self.departures[k] += p;
                        }
                        self.counters.transit_departures += 1.0;
                    }
                    _ => self.counters.exits += 1.0,
                }
            } else if t_next == self.next_arrival {
                self.next_arrival = now + exp_time(&mut self.rng_arrival, rate_max);
                let mut u = self.rng_arrival.random::<f64>() * rate_max;
                let mut letter = None;
                for &(class, dest, r) in &np.external {
                    if u < r {
                        letter = Some((class, dest, true));
                        break;
                    }
                    u -= r;
                }
                if letter.is_none() {
                    for &k in &np.incoming {
                        let r = lambda.value(&plan.keys[k], now);
                        if u < r {
                            letter = Some((plan.keys[k].class, plan.keys[k].dest, false));
                            break;
                        }
                        u -= r;
                    }
                }
                if let Some((class, dest, external)) = letter {
                    let mut c = Customer::new(class, dest);
                    c.requirement = Some(model.law(class, v).sample(&mut self.rng_service));
                    self.queue.customers.push(c);
                    if external {
                        self.counters.external_arrivals += 1.0;
                    } else {
                        self.counters.transit_arrivals += 1.0;
                    }
                }
            } else {
                self.next_swap = now + exp_time(&mut self.rng_swap, np.swap_total);
                let mut u = self.rng_swap.random::<f64>() * np.swap_total;
                let mut from = np.swaps[np.swaps.len() - 1].0;
                for &(w, b) in &np.swaps {
                    if u < b {
                        from = w;
                        break;
                    }
                    u -= b;
                }
                let pool = &snapshot[from];
                let mut q = pool[self.rng_swap.random_range(0..pool.len())].clone();
                for c in &mut q.customers {
                    let (old, new) = (model.law(c.class, NodeId(from)), model.law(c.class, v));
                    if old != new {
                        c.requirement = Some(new.sample_residual(c.age, &mut self.rng_swap));
                    }
                }
                self.queue = q;
            }
        }
    }
}

fn check_grid(model: &Model, lambda: &RateGrid, opts: &PicardOptions) -> Result<(), PicardError> {
    if lambda.bins == 0 || !(lambda.step > 0.0) {
        return Err(PicardError::BadGrid(format!(
            "{} bins of width {}",
            lambda.bins, lambda.step
        )));
    }
    let bound = model.hazard_bound();
    for (k, v) in &lambda.series {
        if v.len() != lambda.bins + 1 {
            return Err(PicardError::BadGrid(format!("{k:?} has {} knots", v.len())));
        }
        if let Some(&x) = v
            .iter()
            .find(|&&x| !(x >= 0.0 && x <= bound * (1.0 + 1e-9)))
        {
            return Err(PicardError::RateBoundExceeded {
                key: *k,
                value: x,
                bound,
            });
        }
    }
    let _ = opts;
    Ok(())
}

/// Knot values from bin averages: midpoints inside, linear extrapolation at
/// the ends.
fn knots_from_bins(b: &[f64]) -> Vec<f64> {
    let k = b.len();
    if k == 1 {
        return vec![b[0], b[0]];
    }
    let mut out = Vec::with_capacity(k + 1);
    out.push(1.5 * b[0] - 0.5 * b[1]);
    for i in 1..k {
        out.push(0.5 * (b[i - 1] + b[i]));
    }
    out.push(1.5 * b[k - 1] - 0.5 * b[k - 2]);
    out
}

/// One application of `ψ`: departure rates of the ensembles driven by `lambda`.
pub fn departure_rates(
    model: &Model,
    init: &NodeEnsemble,
    lambda: &RateGrid,
    opts: &PicardOptions,
    seed: u64,
) -> Result<DepartureEstimate, PicardError> {
    check_grid(model, lambda, opts)?;
    let r = init.replica_count();
    let min = opts.min_replicas.max(opts.batches);
    if r < min || init.replicas.iter().any(|q| q.len() != r) {
        return Err(PicardError::EnsembleTooSmall { replicas: r, min });
    }
    let plan = Plan::new(model, lambda.series.keys().copied().collect());
    let n_keys = plan.keys.len();
    let batches = opts.batches.max(1);
    let mut replicas: Vec<Replica> = init
        .replicas
        .iter()
        .enumerate()
        .flat_map(|(v, qs)| qs.iter().enumerate().map(move |(i, q)| (v, i, q)))
        .map(|(v, i, q)| {
            let g = (v * r + i) as u64;
            Replica {
                node: v,
                batch: i * batches / r,
                queue: q.clone(),
                next_arrival: f64::NEG_INFINITY,
                next_swap: f64::NEG_INFINITY,
                rng_arrival: stream_rng(seed, 3 * g),
                rng_service: stream_rng(seed, 3 * g + 1),
                rng_swap: stream_rng(seed, 3 * g + 2),
                departures: vec![0.0; n_keys],
                counters: FlowCounters::default(),
            }
        })
        .collect();
    let n_nodes = model.node_count();
    // bin sums per batch: [batch][key][bin]
    let mut sums = vec![vec![vec![0.0; lambda.bins]; n_keys]; batches];
    let mut snapshots = Vec::with_capacity(lambda.bins + 1);
    let observe = |reps: &[Replica], t: f64| {
        let mut batches_out = vec![vec![FlowCounters::default(); n_nodes]; batches];
        let mut sizes = vec![vec![0usize; n_nodes]; batches];
        for rep in reps {
            let mut c = rep.counters;
            c.in_system = rep.queue.len() as f64;
            batches_out[rep.batch][rep.node].add(&c);
            sizes[rep.batch][rep.node] += 1;
        }
        for (b, row) in batches_out.iter_mut().enumerate() {
            for (v, c) in row.iter_mut().enumerate() {
                c.scale(1.0 / sizes[b][v].max(1) as f64);
            }
        }
        let nodes = (0..n_nodes)
            .map(|v| {
                DescriptorDist::from_queues(
                    opts.observation,
                    reps[v * r..(v + 1) * r].iter().map(|x| &x.queue),
                )
            })
            .collect();
        EnsembleSnapshot {
            time: t,
            nodes,
            batches: batches_out,
        }
    };
    snapshots.push(observe(&replicas, 0.0));
    for bin in 0..lambda.bins {
        let (t0, t1) = (lambda.knot_time(bin), lambda.knot_time(bin + 1));
        let frozen: Vec<Vec<QueueState>> = (0..n_nodes)
            .map(|v| {
                replicas[v * r..(v + 1) * r]
                    .iter()
                    .map(|x| x.queue.clone())
                    .collect()
            })
            .collect();
        for_each_mut(opts.exec, &mut replicas, |_, rep| {
            rep.run_bin(&plan, lambda, &frozen, t0, t1)
        });
        for rep in &replicas {
            for (k, d) in rep.departures.iter().enumerate() {
                sums[rep.batch][k][bin] += d;
            }
        }
        snapshots.push(observe(&replicas, t1));
    }
    let batch_size = |b: usize| ((b + 1) * r).div_ceil(batches) - (b * r).div_ceil(batches);
    let mut raw = RateGrid::zeros(plan.keys.iter().copied(), lambda.step, lambda.bins);
    let mut se = raw.clone();
    let mut noise_floor = 0.0;
    for (k, key) in plan.keys.iter().enumerate() {
        let total: Vec<f64> = (0..lambda.bins)
            .map(|j| (0..batches).map(|b| sums[b][k][j]).sum::<f64>() / (r as f64 * lambda.step))
            .collect();
        let per_batch: Vec<Vec<f64>> = (0..batches)
            .map(|b| {
                let bins: Vec<f64> = sums[b][k]
                    .iter()
                    .map(|s| s / (batch_size(b).max(1) as f64 * lambda.step))
                    .collect();
                knots_from_bins(&bins)
            })
            .collect();
        let knot_se: Vec<f64> = (0..=lambda.bins)
            .map(|i| mean_se(&per_batch.iter().map(|p| p[i]).collect::<Vec<_>>()).1)
            .collect();
        noise_floor += lambda.step
            * (0.5 * knot_se[0]
                + knot_se[1..lambda.bins].iter().sum::<f64>()
                + 0.5 * knot_se[lambda.bins]);
        raw.series.insert(*key, knots_from_bins(&total));
        se.series.insert(*key, knot_se);
    }
    let lip = opts.lipschitz.unwrap_or_else(|| model.default_lipschitz());
    let rates = lipschitz_project(&raw, lip, model.hazard_bound());
    let final_ensemble = NodeEnsemble {
        replicas: (0..n_nodes)
            .map(|v| {
                replicas[v * r..(v + 1) * r]
                    .iter()
                    .map(|x| x.queue.clone())
                    .collect()
            })
            .collect(),
    };
    Ok(DepartureEstimate {
        rates,
        raw,
        se,
        noise_floor,
        snapshots,
        final_ensemble,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardSolution {
    /// Self-consistent rates `λ̄`.
    pub rates: RateGrid,
    /// Distances `d(λ^k, λ^{k+1})`.
    pub distances: Vec<f64>,
    pub noise_floor: f64,
    pub converged: bool,
    /// `d(λ̄, ψ(λ̄))` under an independent seed.
    pub residual: Option<f64>,
    pub residual_noise_floor: Option<f64>,
    /// Ensemble run driven by the returned rates.
    pub estimate: DepartureEstimate,
}

impl PicardSolution {
    pub fn ratios(&self) -> Vec<f64> {
        self.distances.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

/// Iterates `λ ← ψ(λ)` from `λ ≡ 0` on `[0, window]`.
pub fn picard_solve(
    model: &Model,
    init: &NodeEnsemble,
    keys: &[FlowKey],
    window: f64,
    tol: f64,
    opts: &PicardOptions,
    seed: u64,
) -> Result<PicardSolution, PicardError> {
    let ft = model.hazard_bound() * window;
    if ft > opts.max_hazard_window {
        return Err(PicardError::WindowTooLong {
            what: "hazard bound x window",
            value: ft,
            max: opts.max_hazard_window,
        });
    }
    let bt = model.swap_bound() * window;
    if bt > opts.max_swap_window {
        return Err(PicardError::WindowTooLong {
            what: "swap rate x window",
            value: bt,
            max: opts.max_swap_window,
        });
    }
    let bins = (window / opts.step).round() as usize;
    if bins == 0 || (bins as f64 * opts.step - window).abs() > 1e-9 * window.max(1.0) {
        return Err(PicardError::BadGrid(format!(
            "window {window} is not a multiple of the step {}",
            opts.step
        )));
    }
    let mut lambda = RateGrid::zeros(keys.iter().copied(), window / bins as f64, bins);
    let mut distances = Vec::new();
    let mut noise_floor;
    let mut growing = 0usize;
    let mut converged = false;
    let mut estimate;
    loop {
        estimate = departure_rates(model, init, &lambda, opts, seed)?;
        noise_floor = estimate.noise_floor;
        let d = rate_distance(&lambda, &estimate.rates)?;
        distances.push(d);
        lambda = estimate.rates.clone();
        if d < tol {
            converged = true;
            break;
        }
        if let [.., prev, last] = distances[..] {
            if last >= prev && prev > noise_floor {
                growing += 1;
                if growing >= 3 {
                    let ratios = distances.windows(2).map(|w| w[1] / w[0]).collect();
                    return Err(PicardError::NoContraction {
                        iteration: distances.len(),
                        ratios,
                    });
                }
            } else {
                growing = 0;
            }
        }
        if distances.len() >= opts.max_iter {
            break;
        }
    }
    let (mut residual, mut residual_noise_floor) = (None, None);
    if opts.verify {
        let fresh = departure_rates(model, init, &lambda, opts, derive_seed(seed, 0x7e51))?;
        residual = Some(rate_distance(&lambda, &fresh.rates)?);
        residual_noise_floor = Some(fresh.noise_floor);
        estimate = fresh;
    }
    Ok(PicardSolution {
        rates: lambda,
        distances,
        noise_floor,
        converged,
        residual,
        residual_noise_floor,
        estimate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSolution {
    pub windows: Vec<PicardSolution>,
    /// Knot snapshots over the whole horizon, without repeated window edges.
    pub snapshots: Vec<EnsembleSnapshot>,
    pub final_ensemble: NodeEnsemble,
}

/// Chains [`picard_solve`] over consecutive windows of length `window`.
pub fn windowed_solve(
    model: &Model,
    init: &NodeEnsemble,
    keys: &[FlowKey],
    horizon: f64,
    window: f64,
    tol: f64,
    opts: &PicardOptions,
    seed: u64,
) -> Result<WindowedSolution, PicardError> {
    let m = (horizon / window).round() as usize;
    if m == 0 || (m as f64 * window - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(PicardError::BadGrid(format!(
            "horizon {horizon} is not a multiple of the window {window}"
        )));
    }
    let mut ensemble = init.clone();
    let mut windows = Vec::with_capacity(m);
    let mut snapshots: Vec<EnsembleSnapshot> = Vec::new();
    let mut carried: Vec<Vec<FlowCounters>> = Vec::new();
    for j in 0..m {
        let s = if j == 0 {
            seed
        } else {
            derive_seed(seed, j as u64)
        };
        let sol = picard_solve(model, &ensemble, keys, window, tol, opts, s).map_err(|e| {
            PicardError::WindowFailed {
                window: j,
                source: Box::new(e),
            }
        })?;
        let offset = j as f64 * window;
        for (i, snap) in sol.estimate.snapshots.iter().enumerate() {
            if j > 0 && i == 0 {
                continue;
            }
            let mut snap = snap.clone();
            snap.time += offset;
            if !carried.is_empty() {
                for (b, row) in snap.batches.iter_mut().enumerate() {
                    for (v, c) in row.iter_mut().enumerate() {
                        let base = carried[b][v];
                        c.external_arrivals += base.external_arrivals;
                        c.transit_arrivals += base.transit_arrivals;
                        c.transit_departures += base.transit_departures;
                        c.exits += base.exits;
                    }
                }
            }
            snapshots.push(snap);
        }
        carried = snapshots.last().unwrap().batches.clone();
        ensemble = sol.estimate.final_ensemble.clone();
        windows.push(sol);
    }
    Ok(WindowedSolution {
        windows,
        snapshots,
        final_ensemble: ensemble,
    })
}
