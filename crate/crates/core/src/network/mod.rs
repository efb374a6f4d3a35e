//! Exact event-driven simulation of the `N`-fold mean-field network.
//!
//! The network has `N` copies of every node. External customers arrive at
//! every copy independently; a served customer moves to a greedily chosen
//! neighbor node and a uniformly chosen copy there (or exits when its
//! destination is at most one hop away); and every pair of copies across an
//! edge `v - v'` exchanges servers at rate `beta / N`, each server carrying
//! its queue.
//!
//! Service completions are driven by sampled requirements: each customer
//! holds its total demand at the current server and completes when its
//! attained service reaches it. Attained service only grows for the customer
//! in service and is synchronized lazily per slot.

mod measure;

pub use measure::{Descriptor, DescriptorDist, DescriptorSpace, EmpiricalMeasure};

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::stream_rng;
use crate::model::{InitialLaw, Model, ModelError};
use crate::queue::{route_served, ClassId, Customer, QueueError, QueueState, TransferOutcome};
use crate::topology::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("event {0:?} does not fit the current state")]
    InconsistentEvent(Event),
    #[error("event budget of {0} exhausted before the horizon (runaway queues?)")]
    EventBudgetExceeded(u64),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Event {
    Arrival {
        node: NodeId,
        copy: usize,
        class: ClassId,
        dest: NodeId,
    },
    Completion {
        node: NodeId,
        copy: usize,
    },
    Swap {
        a: NodeId,
        copy_a: usize,
        b: NodeId,
        copy_b: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EventCounters {
    pub arrivals: u64,
    pub completions: u64,
    pub exits: u64,
    pub transits: u64,
    pub swaps: u64,
}

impl EventCounters {
    pub fn total(&self) -> u64 {
        self.arrivals + self.completions + self.swaps
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Hard cap on processed events for one run.
    pub event_budget: u64,
    pub observation: DescriptorSpace,
    /// Keep every atom in snapshots, not just descriptor distributions.
    pub keep_full: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            event_budget: 50_000_000,
            observation: DescriptorSpace::default(),
            keep_full: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Timer {
    time: f64,
    seq: u64,
    slot: usize,
    version: u64,
}

impl PartialEq for Timer {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Timer {}
impl PartialOrd for Timer {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Timer {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

/// Per-node observation at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSnapshot {
    pub descriptors: DescriptorDist,
    pub full: Option<EmpiricalMeasure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub nodes: Vec<NodeSnapshot>,
    pub customers_in_system: u64,
    pub counters: EventCounters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub final_time: f64,
    pub counters: EventCounters,
}

/// Configuration of the `N`-fold network at one instant.
#[derive(Debug, Clone)]
pub struct NetworkState<'m> {
    model: &'m Model,
    copies: usize,
    /// Slot `v * copies + k` holds the queue of copy `k` of node `v`.
    queues: Vec<QueueState>,
    synced_at: Vec<f64>,
    clock: f64,
    rng: ChaCha8Rng,
    timers: BinaryHeap<Reverse<Timer>>,
    versions: Vec<u64>,
    seq: u64,
    counters: EventCounters,
    in_system: u64,
    options: SimOptions,
    /// Copies of node `v` with queue length `j` (last bucket: `>= cap`).
    length_counts: Vec<Vec<u64>>,
    occupancy: Vec<Vec<f64>>,
    occupancy_since: Vec<Vec<f64>>,
    poisson_rate: f64,
}

const OCCUPANCY_CAP: usize = 64;

impl<'m> NetworkState<'m> {
    /// Draws `copies` i.i.d. initial queues per node from `init`.
    pub fn init(
        model: &'m Model,
        copies: usize,
        init: &InitialLaw,
        seed: u64,
        options: SimOptions,
    ) -> Result<Self, NetworkError> {
        if copies == 0 {
            return Err(NetworkError::InvalidConfig(
                "copy count N must be at least 1".into(),
            ));
        }
        init.validate(model.node_count())?;
        let n_nodes = model.node_count();
        let mut rng = stream_rng(seed, 0);
        let mut queues = Vec::with_capacity(n_nodes * copies);
        for v in model.graph.nodes() {
            for _ in 0..copies {
                let mut q = init.at(v).sample(&mut rng);
                for c in &mut q.customers {
                    c.requirement = Some(model.law(c.class, v).sample_residual(c.age, &mut rng));
                }
                queues.push(q);
            }
        }
        let per_copy: f64 = model
            .graph
            .nodes()
            .map(|v| model.arrivals.total_at(v))
            .sum::<f64>()
            + model.graph.edges().iter().map(|e| e.beta).sum::<f64>();
        let mut state = NetworkState {
            model,
            copies,
            in_system: queues.iter().map(|q| q.len() as u64).sum(),
            synced_at: vec![0.0; queues.len()],
            versions: vec![0; queues.len()],
            queues,
            clock: 0.0,
            rng,
            timers: BinaryHeap::new(),
            seq: 0,
            counters: EventCounters::default(),
            options,
            length_counts: vec![vec![0; OCCUPANCY_CAP + 1]; n_nodes],
            occupancy: vec![vec![0.0; OCCUPANCY_CAP + 1]; n_nodes],
            occupancy_since: vec![vec![0.0; OCCUPANCY_CAP + 1]; n_nodes],
            poisson_rate: per_copy * copies as f64,
        };
        for slot in 0..state.queues.len() {
            let len = state.queues[slot].len().min(OCCUPANCY_CAP);
            state.length_counts[slot / copies][len] += 1;
            state.reschedule(slot);
        }
        Ok(state)
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn copies(&self) -> usize {
        self.copies
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn counters(&self) -> EventCounters {
        self.counters
    }

    pub fn customers_in_system(&self) -> u64 {
        self.in_system
    }

    fn slot(&self, node: NodeId, copy: usize) -> usize {
        node.0 * self.copies + copy
    }

    fn node_of(&self, slot: usize) -> NodeId {
        NodeId(slot / self.copies)
    }

    /// Queue at `(node, copy)` with attained service brought up to the clock.
    pub fn queue(&self, node: NodeId, copy: usize) -> QueueState {
        self.synced_queue(self.slot(node, copy))
    }

    fn synced_queue(&self, slot: usize) -> QueueState {
        let mut q = self.queues[slot].clone();
        let disc = self.model.discipline(self.node_of(slot));
        q.advance(self.clock - self.synced_at[slot], disc);
        q
    }

    fn sync(&mut self, slot: usize) {
        let dt = self.clock - self.synced_at[slot];
        if dt > 0.0 {
            let disc = self.model.discipline(self.node_of(slot));
            self.queues[slot].advance(dt, disc);
        }
        self.synced_at[slot] = self.clock;
    }

    fn reschedule(&mut self, slot: usize) {
        self.versions[slot] += 1;
        let q = &self.queues[slot];
        let disc = self.model.discipline(self.node_of(slot));
        if let Ok(i) = q.select_in_service(disc) {
            let remaining = q.customers[i].remaining().unwrap_or(0.0);
            self.seq += 1;
            self.timers.push(Reverse(Timer {
                time: self.synced_at[slot] + remaining,
                seq: self.seq,
                slot,
                version: self.versions[slot],
            }));
        }
    }

    fn peek_timer(&mut self) -> Option<Timer> {
        while let Some(Reverse(t)) = self.timers.peek().copied() {
            if t.version == self.versions[t.slot] {
                return Some(t);
            }
            self.timers.pop();
        }
        None
    }

    fn record_length_change(&mut self, node: NodeId, old_len: usize, new_len: usize) {
        let (a, b) = (old_len.min(OCCUPANCY_CAP), new_len.min(OCCUPANCY_CAP));
        if a == b {
            return;
        }
        for bucket in [a, b] {
            let since = self.occupancy_since[node.0][bucket];
            self.occupancy[node.0][bucket] +=
                self.length_counts[node.0][bucket] as f64 * (self.clock - since);
            self.occupancy_since[node.0][bucket] = self.clock;
        }
        self.length_counts[node.0][a] -= 1;
        self.length_counts[node.0][b] += 1;
    }

    /// Time-average over `[0, clock]` of the fraction of copies of `node`
    /// with each queue length (last entry: length `>= 64`).
    pub fn time_average_lengths(&self, node: NodeId) -> Vec<f64> {
        let norm = self.clock * self.copies as f64;
        (0..=OCCUPANCY_CAP)
            .map(|j| {
                let pending = self.length_counts[node.0][j] as f64
                    * (self.clock - self.occupancy_since[node.0][j]);
                if norm > 0.0 {
                    (self.occupancy[node.0][j] + pending) / norm
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Samples the next event and the time until it. `None` when no event can
    /// ever occur (no arrivals, no swaps, all servers idle).
    pub fn next_event(&mut self) -> Option<(f64, Event)> {
        let timer = self.peek_timer();
        let t_poisson = if self.poisson_rate > 0.0 {
            let e: f64 = Exp1.sample(&mut self.rng);
            self.clock + e / self.poisson_rate
        } else {
            f64::INFINITY
        };
        match timer {
            Some(t) if t.time <= t_poisson => {
                let node = self.node_of(t.slot);
                let copy = t.slot % self.copies;
                Some((
                    (t.time - self.clock).max(0.0),
                    Event::Completion { node, copy },
                ))
            }
            _ if t_poisson.is_finite() => {
                let ev = self.sample_poisson_event();
                Some((t_poisson - self.clock, ev))
            }
            _ => None,
        }
    }

    fn sample_poisson_event(&mut self) -> Event {
        let model = self.model;
        let n = self.copies as f64;
        let mut u = self.rng.random::<f64>() * self.poisson_rate;
        for v in model.graph.nodes() {
            for s in model.arrivals.at(v) {
                let r = n * s.rate;
                if u < r {
                    let copy = self.rng.random_range(0..self.copies);
                    return Event::Arrival {
                        node: v,
                        copy,
                        class: s.class,
                        dest: s.dest,
                    };
                }
                u -= r;
            }
        }
        let edges = model.graph.edges();
        let mut pick = edges.len().saturating_sub(1);
        for (i, e) in edges.iter().enumerate() {
            let r = n * e.beta;
            if u < r && e.beta > 0.0 {
                pick = i;
                break;
            }
            u -= r;
        }
        // rounding can leave `u` past the last positive-rate stream
        while edges[pick].beta <= 0.0 && pick > 0 {
            pick -= 1;
        }
        let e = edges[pick];
        Event::Swap {
            a: e.a,
            copy_a: self.rng.random_range(0..self.copies),
            b: e.b,
            copy_b: self.rng.random_range(0..self.copies),
        }
    }

    /// Advances the clock by `dt` and applies `event`.
    pub fn apply_event(&mut self, dt: f64, event: Event) -> Result<(), NetworkError> {
        if !(dt >= 0.0) {
            return Err(NetworkError::InconsistentEvent(event));
        }
        let check =
            |node: NodeId, copy: usize| node.0 < self.model.node_count() && copy < self.copies;
        match event {
            Event::Arrival { node, copy, .. } | Event::Completion { node, copy }
                if !check(node, copy) =>
            {
                return Err(NetworkError::InconsistentEvent(event))
            }
            Event::Swap {
                a,
                copy_a,
                b,
                copy_b,
            } if !(check(a, copy_a) && check(b, copy_b) && self.model.graph.are_adjacent(a, b)) => {
                return Err(NetworkError::InconsistentEvent(event))
            }
            _ => {}
        }
        if let Event::Completion { node, copy } = event {
            let slot = self.slot(node, copy);
            let due = self.peek_timer().filter(|t| t.slot == slot).map(|t| t.time);
            match due {
                Some(t) if (t - (self.clock + dt)).abs() <= 1e-9 * (1.0 + t.abs()) => {}
                _ => return Err(NetworkError::InconsistentEvent(event)),
            }
        }
        self.clock += dt;
        match event {
            Event::Arrival {
                node,
                copy,
                class,
                dest,
            } => {
                self.counters.arrivals += 1;
                self.in_system += 1;
                let mut c = Customer::new(class, dest);
                c.requirement = Some(self.model.law(class, node).sample(&mut self.rng));
                self.push_customer(node, copy, c)?;
            }
            Event::Completion { node, copy } => self.complete(node, copy)?,
            Event::Swap {
                a,
                copy_a,
                b,
                copy_b,
            } => self.swap(a, copy_a, b, copy_b),
        }
        Ok(())
    }

    fn push_customer(
        &mut self,
        node: NodeId,
        copy: usize,
        c: Customer,
    ) -> Result<(), NetworkError> {
        let slot = self.slot(node, copy);
        self.sync(slot);
        let disc = self.model.discipline(node);
        let before = self.queues[slot].select_in_service(disc).ok();
        let old_len = self.queues[slot].len();
        self.queues[slot].append_arrival(c)?;
        self.record_length_change(node, old_len, old_len + 1);
        let after = self.queues[slot].select_in_service(disc).ok();
        if before != after {
            self.reschedule(slot);
        }
        Ok(())
    }

    fn complete(&mut self, node: NodeId, copy: usize) -> Result<(), NetworkError> {
        let slot = self.slot(node, copy);
        self.sync(slot);
        let disc = self.model.discipline(node);
        let old_len = self.queues[slot].len();
        let served = self.queues[slot].remove_in_service(disc)?;
        self.record_length_change(node, old_len, old_len - 1);
        self.counters.completions += 1;
        match route_served(
            served,
            node,
            &self.model.graph,
            &self.model.transitions,
            &mut self.rng,
        )? {
            TransferOutcome::Exit(_) => {
                self.counters.exits += 1;
                self.in_system -= 1;
            }
            TransferOutcome::Forward { to, mut customer } => {
                self.counters.transits += 1;
                customer.requirement =
                    Some(self.model.law(customer.class, to).sample(&mut self.rng));
                let target = self.rng.random_range(0..self.copies);
                self.push_customer(to, target, customer)?;
            }
        }
        self.reschedule(slot);
        Ok(())
    }

    fn swap(&mut self, a: NodeId, copy_a: usize, b: NodeId, copy_b: usize) {
        self.counters.swaps += 1;
        let (sa, sb) = (self.slot(a, copy_a), self.slot(b, copy_b));
        self.sync(sa);
        self.sync(sb);
        let (la, lb) = (self.queues[sa].len(), self.queues[sb].len());
        self.queues.swap(sa, sb);
        self.record_length_change(a, la, lb);
        self.record_length_change(b, lb, la);
        self.relocate(sa, b, a);
        self.relocate(sb, a, b);
        self.reschedule(sa);
        self.reschedule(sb);
    }

    /// Resamples residual demands of the queue now in `slot` (moved from
    /// `from` to `to`) wherever the service law differs between the nodes.
    fn relocate(&mut self, slot: usize, from: NodeId, to: NodeId) {
        let model = self.model;
        for c in &mut self.queues[slot].customers {
            let (old, new) = (model.law(c.class, from), model.law(c.class, to));
            if old != new {
                c.requirement = Some(new.sample_residual(c.age, &mut self.rng));
            }
        }
    }

    /// Atoms of the empirical measure at `node`.
    pub fn empirical_measure(&self, node: NodeId) -> EmpiricalMeasure {
        let atoms = (0..self.copies)
            .map(|k| self.synced_queue(self.slot(node, k)))
            .collect();
        EmpiricalMeasure { node, atoms }
    }

    pub fn snapshot(&self) -> Snapshot {
        let nodes = self
            .model
            .graph
            .nodes()
            .map(|v| {
                let m = self.empirical_measure(v);
                NodeSnapshot {
                    descriptors: m.descriptors(self.options.observation),
                    full: self.options.keep_full.then_some(m),
                }
            })
            .collect();
        Snapshot {
            time: self.clock,
            nodes,
            customers_in_system: self.in_system,
            counters: self.counters,
        }
    }

    /// Runs until `horizon`, recording snapshots at `snapshot_times`
    /// (sorted, within `[clock, horizon]`).
    pub fn run(
        &mut self,
        horizon: f64,
        snapshot_times: &[f64],
    ) -> Result<Trajectory, NetworkError> {
        if !(horizon >= self.clock) {
            return Err(NetworkError::InvalidConfig(format!(
                "horizon {horizon} is before the clock {}",
                self.clock
            )));
        }
        let mut times: Vec<f64> = snapshot_times.to_vec();
        times.sort_by(f64::total_cmp);
        if let Some(&bad) = times.iter().find(|&&t| t < self.clock || t > horizon) {
            return Err(NetworkError::InvalidConfig(format!(
                "snapshot time {bad} outside [{}, {horizon}]",
                self.clock
            )));
        }
        let mut pending = times.into_iter().peekable();
        let mut snapshots = Vec::new();
        let budget = self.counters.total() + self.options.event_budget;
        loop {
            let next = self.next_event();
            let t_next = next.map_or(f64::INFINITY, |(dt, _)| self.clock + dt);
            while let Some(&ts) = pending.peek() {
                if ts > t_next {
                    break;
                }
                self.clock = ts;
                snapshots.push(self.snapshot());
                pending.next();
            }
            match next {
                Some((_, ev)) if t_next <= horizon => {
                    if self.counters.total() >= budget {
                        return Err(NetworkError::EventBudgetExceeded(self.options.event_budget));
                    }
                    let dt = t_next - self.clock;
                    self.apply_event(dt, ev)?;
                }
                _ => {
                    self.clock = horizon;
                    break;
                }
            }
        }
        Ok(Trajectory {
            snapshots,
            final_time: self.clock,
            counters: self.counters,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArrivalTable, QueueLaw};
    use crate::queue::{Discipline, Letter, ServiceLaw};
    use crate::topology::{Graph, GraphSpec};

    fn path3(beta: f64, lambda: f64) -> Model {
        let g = Graph::build(&GraphSpec::path(3, beta)).unwrap();
        let mut arr = ArrivalTable::new(3);
        arr.add(ClassId(0), NodeId(0), NodeId(2), lambda);
        Model::uniform(g, arr, ServiceLaw::exponential(2.0), Discipline::Fifo).unwrap()
    }

    #[test]
    fn init_variants() {
        let m = path3(0.5, 1.0);
        let s =
            NetworkState::init(&m, 10, &InitialLaw::empty(3), 1, SimOptions::default()).unwrap();
        assert_eq!(s.queues.len(), 30);
        assert!(s.queues.iter().all(QueueState::is_empty));
        assert!(matches!(
            NetworkState::init(&m, 0, &InitialLaw::empty(3), 1, SimOptions::default()),
            Err(NetworkError::InvalidConfig(_))
        ));

        let g = Graph::build(&GraphSpec {
            nodes: vec!["x".into()],
            edges: vec![],
        })
        .unwrap();
        let single = Model::uniform(
            g,
            ArrivalTable::new(1),
            ServiceLaw::exponential(1.0),
            Discipline::Fifo,
        )
        .unwrap();
        let s = NetworkState::init(&single, 1, &InitialLaw::empty(1), 1, SimOptions::default())
            .unwrap();
        assert_eq!(s.queues.len(), 1);
    }

    #[test]
    fn same_seed_same_state_and_trace() {
        let m = path3(0.5, 1.0);
        let letters = vec![Letter {
            class: ClassId(0),
            dest: NodeId(2),
        }];
        let init = InitialLaw {
            per_node: vec![
                QueueLaw::Geometric {
                    p: 0.5,
                    max_len: 5,
                    letters,
                    age_mean: 0.3
                };
                3
            ],
        };
        let run = || {
            let mut s = NetworkState::init(&m, 20, &init, 77, SimOptions::default()).unwrap();
            let mut trace = Vec::new();
            for _ in 0..500 {
                let (dt, ev) = s.next_event().unwrap();
                s.apply_event(dt, ev).unwrap();
                trace.push((s.clock().to_bits(), ev));
            }
            (trace, s.queues.clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn null_system_has_no_events() {
        let m = path3(0.0, 0.0);
        let mut s =
            NetworkState::init(&m, 4, &InitialLaw::empty(3), 3, SimOptions::default()).unwrap();
        assert!(s.next_event().is_none());
        let traj = s.run(10.0, &[0.0, 5.0]).unwrap();
        assert_eq!(traj.snapshots.len(), 2);
        assert_eq!(traj.counters.total(), 0);
    }

    #[test]
    fn swap_exchanges_queues_verbatim() {
        let m = path3(0.5, 0.0);
        let letters = vec![Letter {
            class: ClassId(0),
            dest: NodeId(2),
        }];
        let init = InitialLaw {
            per_node: vec![
                QueueLaw::Geometric {
                    p: 0.8,
                    max_len: 6,
                    letters,
                    age_mean: 0.2
                };
                3
            ],
        };
        let mut s = NetworkState::init(&m, 3, &init, 5, SimOptions::default()).unwrap();
        let qa = s.queue(NodeId(0), 1);
        let qb = s.queue(NodeId(1), 2);
        s.apply_event(
            0.0,
            Event::Swap {
                a: NodeId(0),
                copy_a: 1,
                b: NodeId(1),
                copy_b: 2,
            },
        )
        .unwrap();
        assert_eq!(s.queue(NodeId(0), 1), qb);
        assert_eq!(s.queue(NodeId(1), 2), qa);
        assert!(matches!(
            s.apply_event(
                0.0,
                Event::Swap {
                    a: NodeId(0),
                    copy_a: 0,
                    b: NodeId(2),
                    copy_b: 0
                }
            ),
            Err(NetworkError::InconsistentEvent(_))
        ));
    }

    #[test]
    fn completion_on_path_forwards_to_middle_node() {
        let m = path3(0.0, 0.0);
        let c = Letter {
            class: ClassId(0),
            dest: NodeId(2),
        };
        let mut per_node = vec![QueueLaw::Empty; 3];
        per_node[0] = QueueLaw::Mixture(vec![(QueueState::from_letters(&[c]), 1.0)]);
        let mut s =
            NetworkState::init(&m, 4, &InitialLaw { per_node }, 8, SimOptions::default()).unwrap();
        let (dt, ev) = s.next_event().unwrap();
        assert!(matches!(
            ev,
            Event::Completion {
                node: NodeId(0),
                ..
            }
        ));
        s.apply_event(dt, ev).unwrap();
        let at_v1: Vec<QueueState> = (0..4)
            .map(|k| s.queue(NodeId(1), k))
            .filter(|q| !q.is_empty())
            .collect();
        assert_eq!(at_v1.len(), 1);
        assert_eq!(at_v1[0].customers[0].age, 0.0);
        assert_eq!(at_v1[0].customers[0].dest, NodeId(2));
        assert_eq!(s.customers_in_system(), 4);
    }

    #[test]
    fn pure_death_process_drains() {
        let m = path3(0.0, 0.0);
        let letters = vec![Letter {
            class: ClassId(0),
            dest: NodeId(2),
        }];
        let init = InitialLaw {
            per_node: vec![
                QueueLaw::Geometric {
                    p: 0.7,
                    max_len: 8,
                    letters,
                    age_mean: 0.0
                };
                3
            ],
        };
        let mut s = NetworkState::init(&m, 5, &init, 9, SimOptions::default()).unwrap();
        let mut last = s.customers_in_system();
        while let Some((dt, ev)) = s.next_event() {
            s.apply_event(dt, ev).unwrap();
            assert!(s.customers_in_system() <= last);
            last = s.customers_in_system();
        }
        assert_eq!(last, 0);
    }

    #[test]
    fn event_budget_is_enforced() {
        let m = path3(0.5, 1.0);
        let opts = SimOptions {
            event_budget: 100,
            ..SimOptions::default()
        };
        let mut s = NetworkState::init(&m, 50, &InitialLaw::empty(3), 1, opts).unwrap();
        assert!(matches!(
            s.run(100.0, &[]),
            Err(NetworkError::EventBudgetExceeded(100))
        ));
    }

    #[test]
    fn horizon_zero_gives_initial_snapshot() {
        let m = path3(0.5, 1.0);
        let mut s =
            NetworkState::init(&m, 5, &InitialLaw::empty(3), 1, SimOptions::default()).unwrap();
        let traj = s.run(0.0, &[0.0]).unwrap();
        assert_eq!(traj.snapshots.len(), 1);
        assert_eq!(traj.counters.total(), 0);
        assert_eq!(
            traj.snapshots[0].nodes[0].descriptors.length_histogram()[0],
            1.0
        );
    }

    #[test]
    fn preemptive_priority_resumes_with_kept_age() {
        let g = Graph::build(&GraphSpec::path(2, 0.0)).unwrap();
        let mut arr = ArrivalTable::new(2);
        arr.add(ClassId(0), NodeId(0), NodeId(1), 3.0);
        arr.add(ClassId(1), NodeId(0), NodeId(1), 1.0);
        let tt = crate::queue::ClassTransitionTable::identity(2, &g);
        let disc = Discipline::StaticPriority {
            ranks: vec![0, 1],
            preemptive: true,
        };
        let m = Model::new(
            g,
            vec!["hi".into(), "lo".into()],
            arr,
            vec![ServiceLaw::erlang(2, 4.0); 4],
            vec![disc; 2],
            tt,
        )
        .unwrap();
        let mut s =
            NetworkState::init(&m, 1, &InitialLaw::empty(2), 4, SimOptions::default()).unwrap();
        for _ in 0..5000 {
            let (dt, ev) = s.next_event().unwrap();
            s.apply_event(dt, ev).unwrap();
            let q = s.queue(NodeId(0), 0);
            for c in &q.customers {
                assert!(c.age <= c.requirement.unwrap() + 1e-9);
            }
            // only the served customer (best rank) may have grown past others
            if let Ok(i) = q.select_in_service(m.discipline(NodeId(0))) {
                assert!(q
                    .customers
                    .iter()
                    .all(|c| c.class.0 >= q.customers[i].class.0));
            }
        }
    }
}
