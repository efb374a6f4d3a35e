//! Limit dynamics for exponential services on length-truncated queue words.
//!
//! With constant hazards the attained service drops out of the state, so each
//! node marginal is a probability vector over words of length at most `L`.
//! Arrivals that would create a word longer than `L` are moved to a per-node
//! leak accumulator, which swaps exchange like any other mass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{for_each_chunk_mut, Execution};

const PARALLEL_MIN_WORDS: usize = 1024;
use crate::model::{InitialLaw, Model, ModelError};
use crate::network::{DescriptorDist, DescriptorSpace};
use crate::queue::{Customer, Letter, QueueState};
use crate::topology::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("service law of class {class} at node {node} is not exponential")]
    NotExponential { class: usize, node: usize },
    #[error("discipline at node {0} depends on attained service, not only on the word")]
    NotWordFunction(usize),
    #[error("state dimension {dim} exceeds the cap {cap}")]
    TruncationTooLarge { dim: usize, cap: usize },
    #[error("leak at node {node} reached {leak:.3e} > {tol:.3e} at t = {time}; increase the truncation depth")]
    MassLeakExceeded {
        node: usize,
        leak: f64,
        tol: f64,
        time: f64,
    },
    #[error("letter {0:?} is outside the alphabet")]
    UnknownLetter(Letter),
    #[error("initial word of length {len} exceeds the truncation depth {max}")]
    WordTooLong { len: usize, max: usize },
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("perturbation at node {node} has total mass {sum:.3e}, expected 0")]
    UnbalancedPerturbation { node: usize, sum: f64 },
    #[error("invalid time grid: {0}")]
    BadTimeGrid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Length-lexicographic enumeration of words over a sorted alphabet.
///
/// Index `offset(l) + Σ d_i A^{l-1-i}` for digits `d` of a length-`l` word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateIndex {
    alphabet: Vec<Letter>,
    max_len: usize,
    offsets: Vec<usize>,
}

impl StateIndex {
    pub fn new(
        mut alphabet: Vec<Letter>,
        max_len: usize,
        max_dim: usize,
    ) -> Result<Self, OdeError> {
        alphabet.sort();
        alphabet.dedup();
        let a = alphabet.len();
        let mut offsets = vec![0usize];
        let mut block = 1usize;
        for _ in 0..=max_len {
            let last = *offsets.last().unwrap();
            let next = last.checked_add(block).filter(|&n| n <= max_dim);
            match next {
                Some(n) => offsets.push(n),
                None => {
                    return Err(OdeError::TruncationTooLarge {
                        dim: last.saturating_add(block),
                        cap: max_dim,
                    })
                }
            }
            block = block.saturating_mul(a);
            if a == 0 {
                // only the empty word exists
                while offsets.len() < max_len + 2 {
                    offsets.push(1);
                }
                break;
            }
        }
        Ok(StateIndex {
            alphabet,
            max_len,
            offsets,
        })
    }

    /// Enumerates the words reachable under `model`, including letters of `init`.
    pub fn for_model(
        model: &Model,
        init: &InitialLaw,
        max_len: usize,
        max_dim: usize,
    ) -> Result<Self, OdeError> {
        StateIndex::new(model.reachable_letters(init.letters()), max_len, max_dim)
    }

    pub fn len(&self) -> usize {
        self.offsets[self.max_len + 1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn alphabet(&self) -> &[Letter] {
        &self.alphabet
    }

    pub fn letter_index(&self, l: Letter) -> Option<usize> {
        self.alphabet.binary_search(&l).ok()
    }

    /// Length of the word with index `i`.
    pub fn word_len(&self, i: usize) -> usize {
        self.offsets.partition_point(|&o| o <= i) - 1
    }

    pub fn digits(&self, i: usize) -> Vec<usize> {
        let l = self.word_len(i);
        let a = self.alphabet.len();
        let mut r = i - self.offsets[l];
        let mut out = vec![0; l];
        for slot in out.iter_mut().rev() {
            *slot = r % a;
            r /= a;
        }
        out
    }

    pub fn word(&self, i: usize) -> Vec<Letter> {
        self.digits(i)
            .into_iter()
            .map(|d| self.alphabet[d])
            .collect()
    }

    pub fn index_of_digits(&self, digits: &[usize]) -> Option<usize> {
        if digits.len() > self.max_len {
            return None;
        }
        let a = self.alphabet.len();
        let r = digits.iter().fold(0usize, |acc, &d| acc * a + d);
        Some(self.offsets[digits.len()] + r)
    }

    pub fn index(&self, word: &[Letter]) -> Result<Option<usize>, OdeError> {
        let digits = word
            .iter()
            .map(|&l| self.letter_index(l).ok_or(OdeError::UnknownLetter(l)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.index_of_digits(&digits))
    }

    /// Index of the word `i` followed by letter `a`, or `None` at full length.
    pub fn append(&self, i: usize, a: usize) -> Option<usize> {
        let l = self.word_len(i);
        if l == self.max_len {
            return None;
        }
        Some(self.offsets[l + 1] + (i - self.offsets[l]) * self.alphabet.len() + a)
    }
}

/// Per-node probability vectors over a [`StateIndex`], each followed by the
/// node's leak mass.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedMeasure {
    words: usize,
    data: Vec<f64>,
}

impl TruncatedMeasure {
    /// Zero vector (not a probability measure) with the given shape.
    pub fn zeros(n_nodes: usize, words: usize) -> Self {
        TruncatedMeasure {
            words,
            data: vec![0.0; n_nodes * (words + 1)],
        }
    }

    /// Every node empty with probability one.
    pub fn all_empty(n_nodes: usize, index: &StateIndex) -> Self {
        let mut m = TruncatedMeasure::zeros(n_nodes, index.len());
        for v in 0..n_nodes {
            m.probs_mut(NodeId(v))[0] = 1.0;
        }
        m
    }

    pub fn from_initial(init: &InitialLaw, index: &StateIndex) -> Result<Self, OdeError> {
        let n = init.per_node.len();
        let mut m = TruncatedMeasure::zeros(n, index.len());
        for v in 0..n {
            for (w, p) in init.at(NodeId(v)).word_distribution() {
                let i = index.index(&w)?.ok_or(OdeError::WordTooLong {
                    len: w.len(),
                    max: index.max_len(),
                })?;
                m.probs_mut(NodeId(v))[i] += p;
            }
        }
        Ok(m)
    }

    /// Embeds weighted atoms per node (weights summing to one per node).
    pub fn from_atoms(
        atoms: &[Vec<(QueueState, f64)>],
        index: &StateIndex,
    ) -> Result<Self, OdeError> {
        let mut m = TruncatedMeasure::zeros(atoms.len(), index.len());
        for (v, list) in atoms.iter().enumerate() {
            for (q, w) in list {
                let letters: Vec<Letter> = q.letters().collect();
                let i = index.index(&letters)?.ok_or(OdeError::WordTooLong {
                    len: letters.len(),
                    max: index.max_len(),
                })?;
                m.probs_mut(NodeId(v))[i] += w;
            }
        }
        Ok(m)
    }

    pub fn from_raw(words: usize, data: Vec<f64>) -> Result<Self, OdeError> {
        if !data.len().is_multiple_of(words + 1) {
            return Err(OdeError::InvalidMeasure(format!(
                "length {} is not a multiple of {}",
                data.len(),
                words + 1
            )));
        }
        Ok(TruncatedMeasure { words, data })
    }

    pub fn node_count(&self) -> usize {
        self.data.len() / (self.words + 1)
    }

    pub fn words(&self) -> usize {
        self.words
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn block(&self, v: NodeId) -> &[f64] {
        let w = self.words + 1;
        &self.data[v.0 * w..(v.0 + 1) * w]
    }

    pub fn probs(&self, v: NodeId) -> &[f64] {
        &self.block(v)[..self.words]
    }

    pub fn probs_mut(&mut self, v: NodeId) -> &mut [f64] {
        let w = self.words + 1;
        &mut self.data[v.0 * w..v.0 * w + self.words]
    }

    pub fn leak(&self, v: NodeId) -> f64 {
        self.block(v)[self.words]
    }

    /// Word mass plus leak at `v`.
    pub fn mass(&self, v: NodeId) -> f64 {
        self.block(v).iter().sum()
    }

    /// Checks nonnegativity and unit mass per node within `tol`.
    pub fn validate(&self, tol: f64) -> Result<(), OdeError> {
        for v in 0..self.node_count() {
            let b = self.block(NodeId(v));
            if let Some(x) = b.iter().find(|x| !(**x >= -tol)) {
                return Err(OdeError::InvalidMeasure(format!("entry {x} at node {v}")));
            }
            let s: f64 = b.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(OdeError::InvalidMeasure(format!("node {v} has mass {s}")));
            }
        }
        Ok(())
    }

    pub fn l1_distance(&self, other: &TruncatedMeasure) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    /// Probability of each queue length `0..=L` at `v`.
    pub fn length_marginal(&self, v: NodeId, index: &StateIndex) -> Vec<f64> {
        let mut out = vec![0.0; index.max_len() + 1];
        for (i, p) in self.probs(v).iter().enumerate() {
            out[index.word_len(i)] += p;
        }
        out
    }

    /// Descriptor distribution at `v`; the leak is reported as overflow.
    pub fn descriptors(
        &self,
        v: NodeId,
        index: &StateIndex,
        space: DescriptorSpace,
    ) -> DescriptorDist {
        let mut d = DescriptorDist::new(space);
        for (i, &p) in self.probs(v).iter().enumerate() {
            if p != 0.0 {
                d.add(space.describe_letters(&index.word(i)), p);
            }
        }
        let leak = self.leak(v);
        if leak != 0.0 {
            d.add(crate::network::Descriptor::Overflow, leak);
        }
        d
    }
}

/// Signed perturbation with the layout of a [`TruncatedMeasure`].
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityVector(pub TruncatedMeasure);

impl SensitivityVector {
    pub fn l1_norm(&self) -> f64 {
        self.0.data.iter().map(|x| x.abs()).sum()
    }

    pub fn node_sum(&self, v: NodeId) -> f64 {
        self.0.mass(v)
    }
}

/// Transit arrival intensity per target node and letter index.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitRates {
    pub per_node: Vec<Vec<f64>>,
}

impl TransitRates {
    pub fn get(&self, v: NodeId, letter: usize) -> f64 {
        self.per_node[v.0][letter]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Served {
    rate: f64,
    parent: usize,
    letter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IntegrationAudit {
    pub steps: u64,
    /// Entries raised from a negative value to zero.
    pub clamped: u64,
    pub min_entry: f64,
    /// Largest per-step deviation of a node's total mass from one.
    pub max_mass_drift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<TruncatedMeasure>,
    pub audit: IntegrationAudit,
}

impl OdeTrajectory {
    pub fn last(&self) -> &TruncatedMeasure {
        self.states
            .last()
            .expect("trajectory holds the initial state")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityTrajectory {
    pub times: Vec<f64>,
    pub mu: Vec<TruncatedMeasure>,
    pub h: Vec<SensitivityVector>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub leak_tol: f64,
    pub exec: Execution,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            leak_tol: 1e-4,
            exec: Execution::Sequential,
        }
    }
}

/// Drift of the truncated limit equation for one model.
#[derive(Debug, Clone)]
pub struct OdeSystem<'m> {
    model: &'m Model,
    index: StateIndex,
    options: OdeOptions,
    served: Vec<Vec<Option<Served>>>,
    /// `routes[v][a]`: (target node, letter index there, probability).
    routes: Vec<Vec<Vec<(usize, usize, f64)>>>,
    external: Vec<Vec<f64>>,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl<'m> OdeSystem<'m> {
    pub fn new(model: &'m Model, index: StateIndex, options: OdeOptions) -> Result<Self, OdeError> {
        let n = model.node_count();
        for v in model.graph.nodes() {
            if !model.discipline(v).is_word_function() {
                return Err(OdeError::NotWordFunction(v.0));
            }
            for k in 0..model.class_count() {
                if model
                    .law(crate::queue::ClassId(k), v)
                    .exponential_rate()
                    .is_none()
                {
                    return Err(OdeError::NotExponential {
                        class: k,
                        node: v.0,
                    });
                }
            }
        }
        let alphabet = index.alphabet().to_vec();
        let mut routes = vec![vec![Vec::new(); alphabet.len()]; n];
        for v in model.graph.nodes() {
            for (a, l) in alphabet.iter().enumerate() {
                if model.graph.dist(v, l.dest) <= 1 {
                    continue;
                }
                let kernel = model
                    .graph
                    .routing_kernel(v, l.dest)
                    .expect("destination at least two hops away");
                for (u, p) in kernel {
                    let class = model
                        .transitions
                        .get(l.class, v, u)
                        .map_err(|e| OdeError::InvalidMeasure(e.to_string()))?;
                    let target = Letter {
                        class,
                        dest: l.dest,
                    };
                    let b = index
                        .letter_index(target)
                        .ok_or(OdeError::UnknownLetter(target))?;
                    routes[v.0][a].push((u.0, b, p));
                }
            }
        }
        let mut external = vec![vec![0.0; alphabet.len()]; n];
        for v in model.graph.nodes() {
            for s in model.arrivals.at(v) {
                let a = index
                    .letter_index(s.letter())
                    .ok_or(OdeError::UnknownLetter(s.letter()))?;
                external[v.0][a] += s.rate;
            }
        }
        let served = model
            .graph
            .nodes()
            .map(|v| {
                let disc = model.discipline(v);
                (0..index.len())
                    .map(|i| {
                        let digits = index.digits(i);
                        let customers: Vec<Customer> = digits
                            .iter()
                            .map(|&d| Customer::new(alphabet[d].class, alphabet[d].dest))
                            .collect();
                        disc.select(&customers).map(|s| {
                            let mut rest = digits.clone();
                            let letter = rest.remove(s);
                            let rate = model
                                .law(alphabet[letter].class, v)
                                .exponential_rate()
                                .unwrap();
                            Served {
                                rate,
                                parent: index.index_of_digits(&rest).unwrap(),
                                letter,
                            }
                        })
                    })
                    .collect()
            })
            .collect();
        let neighbors = model
            .graph
            .nodes()
            .map(|v| {
                model
                    .graph
                    .neighbors(v)
                    .iter()
                    .map(|&(u, e)| (u.0, model.graph.edges()[e].beta))
                    .collect()
            })
            .collect();
        Ok(OdeSystem {
            model,
            index,
            options,
            served,
            routes,
            external,
            neighbors,
        })
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn index(&self) -> &StateIndex {
        &self.index
    }

    fn block_len(&self) -> usize {
        self.index.len() + 1
    }

    /// Transit intensities generated by `x` (linear in `x`).
    pub fn transit_rates(&self, x: &TruncatedMeasure) -> TransitRates {
        TransitRates {
            per_node: self.transit_raw(&x.data),
        }
    }

    fn transit_raw(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let a = self.index.alphabet().len();
        let w = self.block_len();
        let mut out = vec![vec![0.0; a]; self.model.node_count()];
        let mut served_mass = vec![0.0; a];
        for v in 0..self.model.node_count() {
            served_mass.iter_mut().for_each(|m| *m = 0.0);
            for (i, s) in self.served[v].iter().enumerate() {
                if let Some(s) = s {
                    served_mass[s.letter] += x[v * w + i] * s.rate;
                }
            }
            for (l, &m) in served_mass.iter().enumerate() {
                if m != 0.0 {
                    for &(u, b, p) in &self.routes[v][l] {
                        out[u][b] += m * p;
                    }
                }
            }
        }
        out
    }

    /// Writes the linear action of the frozen-rate generator into `out`.
    /// `rates[v][a]` are arrival intensities; `full` adds completions and swaps.
    fn apply(&self, x: &[f64], rates: &[Vec<f64>], full: bool, out: &mut [f64]) {
        let w = self.block_len();
        let words = self.index.len();
        // Small blocks cost less than a pool dispatch.
        let exec = if words >= PARALLEL_MIN_WORDS {
            self.options.exec
        } else {
            Execution::Sequential
        };
        for_each_chunk_mut(exec, out, w, |v, o| {
            o.iter_mut().for_each(|y| *y = 0.0);
            let xv = &x[v * w..(v + 1) * w];
            let total_in: f64 = rates[v].iter().sum();
            for i in 0..words {
                let m = xv[i];
                if m == 0.0 {
                    continue;
                }
                if total_in > 0.0 {
                    o[i] -= m * total_in;
                    for (a, &r) in rates[v].iter().enumerate() {
                        if r != 0.0 {
                            match self.index.append(i, a) {
                                Some(j) => o[j] += m * r,
                                None => o[words] += m * r,
                            }
                        }
                    }
                }
                if full {
                    if let Some(s) = self.served[v][i] {
                        o[i] -= m * s.rate;
                        o[s.parent] += m * s.rate;
                    }
                }
            }
            if full {
                for &(u, beta) in &self.neighbors[v] {
                    if beta != 0.0 {
                        let xu = &x[u * w..(u + 1) * w];
                        for k in 0..w {
                            o[k] += beta * (xu[k] - xv[k]);
                        }
                    }
                }
            }
        });
    }

    fn drift_raw(&self, x: &[f64], out: &mut [f64]) {
        let mut rates = self.transit_raw(x);
        for (r, e) in rates.iter_mut().zip(&self.external) {
            r.iter_mut().zip(e).for_each(|(a, b)| *a += b);
        }
        self.apply(x, &rates, true, out);
    }

    /// Right-hand side `g(μ)`; the leak entries hold the leak flux.
    pub fn drift(&self, mu: &TruncatedMeasure) -> TruncatedMeasure {
        let mut out = TruncatedMeasure::zeros(mu.node_count(), mu.words);
        self.drift_raw(&mu.data, &mut out.data);
        out
    }

    /// Derivative of the drift at `mu` in direction `h`.
    pub fn drift_derivative(
        &self,
        mu: &TruncatedMeasure,
        h: &TruncatedMeasure,
    ) -> TruncatedMeasure {
        let mut out = TruncatedMeasure::zeros(mu.node_count(), mu.words);
        self.derivative_raw(&mu.data, &h.data, &mut out.data);
        out
    }

    fn derivative_raw(&self, x: &[f64], h: &[f64], out: &mut [f64]) {
        let mut rates = self.transit_raw(x);
        for (r, e) in rates.iter_mut().zip(&self.external) {
            r.iter_mut().zip(e).for_each(|(a, b)| *a += b);
        }
        self.apply(h, &rates, true, out);
        let coupling = self.transit_raw(h);
        let mut extra = vec![0.0; out.len()];
        self.apply(x, &coupling, false, &mut extra);
        out.iter_mut().zip(&extra).for_each(|(a, b)| *a += b);
    }

    fn check_shape(&self, mu: &TruncatedMeasure) -> Result<(), OdeError> {
        if mu.words != self.index.len() || mu.node_count() != self.model.node_count() {
            return Err(OdeError::InvalidMeasure(format!(
                "shape {}x{} does not match {}x{}",
                mu.node_count(),
                mu.words,
                self.model.node_count(),
                self.index.len()
            )));
        }
        Ok(())
    }

    fn step_grid(horizon: f64, dt: f64) -> Result<(usize, f64), OdeError> {
        if !(dt > 0.0) || !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(OdeError::BadTimeGrid(format!(
                "dt = {dt}, horizon = {horizon}"
            )));
        }
        let steps = (horizon / dt - 1e-9).ceil().max(0.0) as usize;
        let h = if steps == 0 {
            dt
        } else {
            horizon / steps as f64
        };
        Ok((steps, h))
    }

    fn rk4(&self, x: &mut [f64], h: f64, bufs: &mut [Vec<f64>; 5]) {
        let [k1, k2, k3, k4, tmp] = bufs;
        self.drift_raw(x, k1);
        axpy(tmp, x, 0.5 * h, k1);
        self.drift_raw(tmp, k2);
        axpy(tmp, x, 0.5 * h, k2);
        self.drift_raw(tmp, k3);
        axpy(tmp, x, h, k3);
        self.drift_raw(tmp, k4);
        for i in 0..x.len() {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }

    fn project(
        &self,
        x: &mut [f64],
        audit: &mut IntegrationAudit,
        time: f64,
    ) -> Result<(), OdeError> {
        let w = self.block_len();
        for (v, b) in x.chunks_mut(w).enumerate() {
            for y in b.iter_mut() {
                if *y < 0.0 {
                    audit.min_entry = audit.min_entry.min(*y);
                    audit.clamped += 1;
                    *y = 0.0;
                }
            }
            let s: f64 = b.iter().sum();
            audit.max_mass_drift = audit.max_mass_drift.max((s - 1.0).abs());
            b.iter_mut().for_each(|y| *y /= s);
            let leak = b[w - 1];
            if leak > self.options.leak_tol {
                return Err(OdeError::MassLeakExceeded {
                    node: v,
                    leak,
                    tol: self.options.leak_tol,
                    time,
                });
            }
        }
        Ok(())
    }

    /// RK4 with step close to `dt` (adjusted to divide `horizon`), recording
    /// every step.
    pub fn integrate(
        &self,
        mu0: &TruncatedMeasure,
        horizon: f64,
        dt: f64,
    ) -> Result<OdeTrajectory, OdeError> {
        let (steps, _) = Self::step_grid(horizon, dt)?;
        let record: Vec<usize> = (0..=steps).collect();
        self.integrate_steps(mu0, horizon, dt, &record)
    }

    /// Like [`integrate`](Self::integrate) but records only at `times`, each
    /// of which must lie on the step grid.
    pub fn integrate_at(
        &self,
        mu0: &TruncatedMeasure,
        times: &[f64],
        dt: f64,
    ) -> Result<OdeTrajectory, OdeError> {
        let horizon = times.iter().copied().fold(0.0, f64::max);
        let (steps, h) = Self::step_grid(horizon, dt)?;
        let mut record = Vec::with_capacity(times.len());
        for &t in times {
            let k = if steps == 0 { 0.0 } else { t / h };
            if (k - k.round()).abs() > 1e-6 || t < 0.0 {
                return Err(OdeError::BadTimeGrid(format!(
                    "time {t} is not a multiple of the step {h}"
                )));
            }
            record.push(k.round() as usize);
        }
        let mut sorted = record.clone();
        sorted.sort_unstable();
        if sorted != record {
            return Err(OdeError::BadTimeGrid(
                "record times must be increasing".into(),
            ));
        }
        self.integrate_steps(mu0, horizon, dt, &record)
    }

    fn integrate_steps(
        &self,
        mu0: &TruncatedMeasure,
        horizon: f64,
        dt: f64,
        record: &[usize],
    ) -> Result<OdeTrajectory, OdeError> {
        self.check_shape(mu0)?;
        mu0.validate(1e-8)?;
        let (steps, h) = Self::step_grid(horizon, dt)?;
        let n = mu0.data.len();
        let mut bufs: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
        let mut x = mu0.data.clone();
        let mut audit = IntegrationAudit::default();
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut next = record.iter().peekable();
        for k in 0..=steps {
            if k > 0 {
                self.rk4(&mut x, h, &mut bufs);
                audit.steps += 1;
                self.project(&mut x, &mut audit, k as f64 * h)?;
            }
            while next.peek() == Some(&&k) {
                times.push(if steps == 0 { 0.0 } else { k as f64 * h });
                states.push(TruncatedMeasure {
                    words: mu0.words,
                    data: x.clone(),
                });
                next.next();
            }
        }
        Ok(OdeTrajectory {
            times,
            states,
            audit,
        })
    }

    /// Integrates `μ` together with the linearized flow `h` started at `h0`.
    pub fn sensitivity(
        &self,
        mu0: &TruncatedMeasure,
        h0: &TruncatedMeasure,
        horizon: f64,
        dt: f64,
    ) -> Result<SensitivityTrajectory, OdeError> {
        self.check_shape(mu0)?;
        self.check_shape(h0)?;
        mu0.validate(1e-8)?;
        for v in 0..h0.node_count() {
            let sum = h0.mass(NodeId(v));
            if sum.abs() > 1e-8 {
                return Err(OdeError::UnbalancedPerturbation { node: v, sum });
            }
        }
        let (steps, h) = Self::step_grid(horizon, dt)?;
        let n = mu0.data.len();
        let words = mu0.words;
        let mut x = mu0.data.clone();
        let mut y = h0.data.clone();
        let mut kx: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
        let mut ky: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
        let (mut tx, mut ty) = (vec![0.0; n], vec![0.0; n]);
        let mut audit = IntegrationAudit::default();
        let wrap = |d: &[f64]| TruncatedMeasure {
            words,
            data: d.to_vec(),
        };
        let mut out = SensitivityTrajectory {
            times: vec![0.0],
            mu: vec![wrap(&x)],
            h: vec![SensitivityVector(wrap(&y))],
        };
        for k in 1..=steps {
            let coeffs = [0.0, 0.5, 0.5, 1.0];
            for stage in 0..4 {
                if stage == 0 {
                    tx.copy_from_slice(&x);
                    ty.copy_from_slice(&y);
                } else {
                    axpy(&mut tx, &x, coeffs[stage] * h, &kx[stage - 1]);
                    axpy(&mut ty, &y, coeffs[stage] * h, &ky[stage - 1]);
                }
                self.drift_raw(&tx, &mut kx[stage]);
                self.derivative_raw(&tx, &ty, &mut ky[stage]);
            }
            for i in 0..n {
                x[i] += h / 6.0 * (kx[0][i] + 2.0 * kx[1][i] + 2.0 * kx[2][i] + kx[3][i]);
                y[i] += h / 6.0 * (ky[0][i] + 2.0 * ky[1][i] + 2.0 * ky[2][i] + ky[3][i]);
            }
            self.project(&mut x, &mut audit, k as f64 * h)?;
            out.times.push(k as f64 * h);
            out.mu.push(wrap(&x));
            out.h.push(SensitivityVector(wrap(&y)));
        }
        Ok(out)
    }
}

fn axpy(out: &mut [f64], x: &[f64], a: f64, y: &[f64]) {
    for i in 0..out.len() {
        out[i] = x[i] + a * y[i];
    }
}
