//! The validated network model shared by the simulator, both limit solvers
//! and the generator checks.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use crate::queue::{
    ClassId, ClassTransitionTable, Customer, Discipline, Letter, QueueState, ServiceLaw,
    ServiceLawError,
};
use crate::topology::{Graph, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model needs at least one class")]
    NoClasses,
    #[error("expected {expected} {what}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("arrival rate {rate} for class {class} at {node} is negative or not finite")]
    BadArrivalRate {
        class: ClassId,
        node: NodeId,
        rate: f64,
    },
    #[error("arrival references class {0} outside the alphabet")]
    UnknownClass(ClassId),
    #[error("service law for class {class} at {node}: {source}")]
    BadLaw {
        class: ClassId,
        node: NodeId,
        source: ServiceLawError,
    },
    #[error("priority discipline at {0} does not rank every class")]
    IncompleteRanks(NodeId),
    #[error("class transition table has no entry for class {class} on {from} -> {to}")]
    IncompleteTransitions {
        class: ClassId,
        from: NodeId,
        to: NodeId,
    },
    #[error("initial law is invalid: {0}")]
    BadInitialLaw(String),
}

/// One external Poisson stream: class, entry node, destination, rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrivalStream {
    pub class: ClassId,
    pub dest: NodeId,
    pub rate: f64,
}

impl ArrivalStream {
    pub fn letter(&self) -> Letter {
        Letter {
            class: self.class,
            dest: self.dest,
        }
    }
}

/// External arrival rates, grouped by entry node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArrivalTable {
    per_node: Vec<Vec<ArrivalStream>>,
}

impl ArrivalTable {
    pub fn new(n_nodes: usize) -> Self {
        ArrivalTable {
            per_node: vec![Vec::new(); n_nodes],
        }
    }

    pub fn add(&mut self, class: ClassId, node: NodeId, dest: NodeId, rate: f64) {
        let streams = &mut self.per_node[node.0];
        match streams
            .iter_mut()
            .find(|s| s.class == class && s.dest == dest)
        {
            Some(s) => s.rate += rate,
            None => streams.push(ArrivalStream { class, dest, rate }),
        }
    }

    pub fn at(&self, node: NodeId) -> &[ArrivalStream] {
        &self.per_node[node.0]
    }

    pub fn total_at(&self, node: NodeId) -> f64 {
        self.per_node[node.0].iter().map(|s| s.rate).sum()
    }

    /// `max_v sum_{class, dest} rate`.
    pub fn max_total(&self) -> f64 {
        (0..self.per_node.len())
            .map(|v| self.total_at(NodeId(v)))
            .fold(0.0, f64::max)
    }

    pub fn node_count(&self) -> usize {
        self.per_node.len()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub graph: Graph,
    pub class_names: Vec<String>,
    pub arrivals: ArrivalTable,
    /// Indexed by `class * n_nodes + node`.
    service: Vec<ServiceLaw>,
    pub disciplines: Vec<Discipline>,
    pub transitions: ClassTransitionTable,
}

impl Model {
    pub fn new(
        graph: Graph,
        class_names: Vec<String>,
        arrivals: ArrivalTable,
        service: Vec<ServiceLaw>,
        disciplines: Vec<Discipline>,
        transitions: ClassTransitionTable,
    ) -> Result<Self, ModelError> {
        let n = graph.node_count();
        let k = class_names.len();
        if k == 0 {
            return Err(ModelError::NoClasses);
        }
        if arrivals.node_count() != n {
            return Err(ModelError::Shape {
                what: "arrival rows",
                expected: n,
                got: arrivals.node_count(),
            });
        }
        if service.len() != n * k {
            return Err(ModelError::Shape {
                what: "service laws",
                expected: n * k,
                got: service.len(),
            });
        }
        if disciplines.len() != n {
            return Err(ModelError::Shape {
                what: "disciplines",
                expected: n,
                got: disciplines.len(),
            });
        }
        for v in graph.nodes() {
            for s in arrivals.at(v) {
                if s.class.0 >= k {
                    return Err(ModelError::UnknownClass(s.class));
                }
                if !(s.rate >= 0.0 && s.rate.is_finite()) {
                    return Err(ModelError::BadArrivalRate {
                        class: s.class,
                        node: v,
                        rate: s.rate,
                    });
                }
            }
            if let Discipline::StaticPriority { ranks, .. } = &disciplines[v.0] {
                if ranks.len() < k {
                    return Err(ModelError::IncompleteRanks(v));
                }
            }
            for c in 0..k {
                service[c * n + v.0]
                    .validate()
                    .map_err(|source| ModelError::BadLaw {
                        class: ClassId(c),
                        node: v,
                        source,
                    })?;
                for &(u, _) in graph.neighbors(v) {
                    if transitions.get(ClassId(c), v, u).is_err() {
                        return Err(ModelError::IncompleteTransitions {
                            class: ClassId(c),
                            from: v,
                            to: u,
                        });
                    }
                }
            }
        }
        Ok(Model {
            graph,
            class_names,
            arrivals,
            service,
            disciplines,
            transitions,
        })
    }

    /// Single-class model with one law and one discipline everywhere and
    /// identity class transitions.
    pub fn uniform(
        graph: Graph,
        arrivals: ArrivalTable,
        law: ServiceLaw,
        discipline: Discipline,
    ) -> Result<Self, ModelError> {
        let n = graph.node_count();
        let transitions = ClassTransitionTable::identity(1, &graph);
        Model::new(
            graph,
            vec!["a".into()],
            arrivals,
            vec![law; n],
            vec![discipline; n],
            transitions,
        )
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn law(&self, class: ClassId, node: NodeId) -> &ServiceLaw {
        &self.service[class.0 * self.graph.node_count() + node.0]
    }

    pub fn discipline(&self, node: NodeId) -> &Discipline {
        &self.disciplines[node.0]
    }

    /// Whether every service law is exponential.
    pub fn is_exponential(&self) -> bool {
        self.service.iter().all(|l| l.exponential_rate().is_some())
    }

    /// Uniform bound on all completion hazards.
    pub fn hazard_bound(&self) -> f64 {
        self.service
            .iter()
            .map(ServiceLaw::hazard_bound)
            .fold(0.0, f64::max)
    }

    pub fn arrival_bound(&self) -> f64 {
        self.arrivals.max_total()
    }

    /// Largest total swap rate at a single node.
    pub fn swap_bound(&self) -> f64 {
        self.graph
            .nodes()
            .map(|v| self.graph.swap_rate_at(v))
            .fold(0.0, f64::max)
    }

    /// Bound on the total rate of change of a node marginal in the limit flow
    /// (external and transit arrivals, completions, swaps), summed over nodes.
    pub fn total_rate_bound(&self) -> f64 {
        let f = self.hazard_bound();
        let d = self.graph.max_degree() as f64;
        self.graph
            .nodes()
            .map(|v| 2.0 * (self.arrivals.total_at(v) + d * f + f + self.graph.swap_rate_at(v)))
            .sum()
    }

    /// Growth constant for the linearized flow.
    pub fn gronwall_constant(&self) -> f64 {
        let f = self.hazard_bound();
        let d = self.graph.max_degree() as f64;
        2.0 * (self.arrival_bound() + d * f + f + self.swap_bound()) + 2.0 * d * f
    }

    /// Default Lipschitz constant for departure-rate functions.
    pub fn default_lipschitz(&self) -> f64 {
        2.0 * self.hazard_bound() * (self.arrival_bound() + self.swap_bound()).max(1e-9)
    }

    /// Letters that can ever be present: external arrivals, their images under
    /// class transitions along any edge, and any `extra` letters (for example
    /// from an initial law).
    pub fn reachable_letters(&self, extra: impl IntoIterator<Item = Letter>) -> Vec<Letter> {
        let mut set: BTreeSet<Letter> = extra.into_iter().collect();
        for v in self.graph.nodes() {
            set.extend(self.arrivals.at(v).iter().map(ArrivalStream::letter));
        }
        let mut frontier: Vec<Letter> = set.iter().copied().collect();
        while let Some(l) = frontier.pop() {
            for v in self.graph.nodes() {
                for &(u, _) in self.graph.neighbors(v) {
                    if let Ok(c) = self.transitions.get(l.class, v, u) {
                        let next = Letter {
                            class: c,
                            dest: l.dest,
                        };
                        if set.insert(next) {
                            frontier.push(next);
                        }
                    }
                }
            }
        }
        set.into_iter().collect()
    }
}

/// Law of the initial queue at one node.
#[derive(Debug, Clone, PartialEq)]
pub enum QueueLaw {
    Empty,
    /// Finite mixture of given queues (ages included).
    Mixture(Vec<(QueueState, f64)>),
    /// Length geometric with continuation probability `p`, truncated at
    /// `max_len`; letters i.i.d. uniform over `letters`; every customer gets
    /// an exponential attained service with mean `age_mean` when `age_mean > 0`.
    Geometric {
        p: f64,
        max_len: usize,
        letters: Vec<Letter>,
        age_mean: f64,
    },
}

impl QueueLaw {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            QueueLaw::Empty => Ok(()),
            QueueLaw::Mixture(parts) => {
                let total: f64 = parts.iter().map(|(_, w)| w).sum();
                if parts.is_empty()
                    || parts.iter().any(|(_, w)| !(*w >= 0.0))
                    || (total - 1.0).abs() > 1e-9
                {
                    return Err(ModelError::BadInitialLaw(format!(
                        "mixture weights sum to {total}"
                    )));
                }
                Ok(())
            }
            QueueLaw::Geometric {
                p,
                letters,
                age_mean,
                ..
            } => {
                if !(0.0..1.0).contains(p) || letters.is_empty() || *age_mean < 0.0 {
                    return Err(ModelError::BadInitialLaw(
                        "geometric law needs 0 <= p < 1, letters, age_mean >= 0".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> QueueState {
        match self {
            QueueLaw::Empty => QueueState::empty(),
            QueueLaw::Mixture(parts) => {
                let mut u = rng.random::<f64>();
                for (q, w) in parts {
                    if u < *w {
                        return q.clone();
                    }
                    u -= w;
                }
                parts.last().map(|(q, _)| q.clone()).unwrap_or_default()
            }
            QueueLaw::Geometric {
                p,
                max_len,
                letters,
                age_mean,
            } => {
                let mut q = QueueState::empty();
                while q.len() < *max_len && rng.random::<f64>() < *p {
                    let l = letters[rng.random_range(0..letters.len())];
                    let mut c = Customer::from(l);
                    if *age_mean > 0.0 {
                        let e: f64 = Exp1.sample(rng);
                        c.age = e * age_mean;
                    }
                    q.customers.push(c);
                }
                q
            }
        }
    }

    /// Distribution of the letter word (ages dropped), as (word, probability).
    pub fn word_distribution(&self) -> Vec<(Vec<Letter>, f64)> {
        match self {
            QueueLaw::Empty => vec![(Vec::new(), 1.0)],
            QueueLaw::Mixture(parts) => parts
                .iter()
                .map(|(q, w)| (q.letters().collect(), *w))
                .collect(),
            QueueLaw::Geometric {
                p,
                max_len,
                letters,
                ..
            } => {
                let a = letters.len() as f64;
                let mut out = vec![(Vec::new(), 1.0 - p)];
                let mut layer: Vec<Vec<Letter>> = vec![Vec::new()];
                for len in 1..=*max_len {
                    let stop = if len == *max_len { 1.0 } else { 1.0 - p };
                    let prob = p.powi(len as i32) / a.powi(len as i32) * stop;
                    let mut next = Vec::with_capacity(layer.len() * letters.len());
                    for w in &layer {
                        for &l in letters {
                            let mut w2 = w.clone();
                            w2.push(l);
                            next.push(w2);
                        }
                    }
                    out.extend(next.iter().map(|w| (w.clone(), prob)));
                    layer = next;
                }
                if *max_len == 0 {
                    out[0].1 = 1.0;
                }
                out
            }
        }
    }

    pub fn letters(&self) -> Vec<Letter> {
        match self {
            QueueLaw::Empty => Vec::new(),
            QueueLaw::Mixture(parts) => parts
                .iter()
                .flat_map(|(q, _)| q.letters().collect::<Vec<_>>())
                .collect(),
            QueueLaw::Geometric { letters, .. } => letters.clone(),
        }
    }
}

/// Product initial law: one [`QueueLaw`] per node.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialLaw {
    pub per_node: Vec<QueueLaw>,
}

impl InitialLaw {
    pub fn empty(n_nodes: usize) -> Self {
        InitialLaw {
            per_node: vec![QueueLaw::Empty; n_nodes],
        }
    }

    pub fn at(&self, v: NodeId) -> &QueueLaw {
        &self.per_node[v.0]
    }

    pub fn letters(&self) -> Vec<Letter> {
        self.per_node.iter().flat_map(QueueLaw::letters).collect()
    }

    pub fn validate(&self, n_nodes: usize) -> Result<(), ModelError> {
        if self.per_node.len() != n_nodes {
            return Err(ModelError::Shape {
                what: "initial laws",
                expected: n_nodes,
                got: self.per_node.len(),
            });
        }
        self.per_node.iter().try_for_each(QueueLaw::validate)
    }
}
