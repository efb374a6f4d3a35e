//! Queue states on a single server: customers, service disciplines,
//! service-time laws and the class-transition table.
//!
//! The three structural maps on queue states are
//! [`QueueState::append_arrival`] (a new customer joins at the back with zero
//! attained service), [`QueueState::remove_in_service`] (the customer being
//! served is deleted) and [`transfer`] (service completion followed either by
//! an exit or by a jump to a greedily chosen neighbor).

mod discipline;
mod service;
mod transitions;

pub use discipline::Discipline;
pub use service::{ServiceLaw, ServiceLawError};
pub use transitions::ClassTransitionTable;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{Graph, NodeId, TopologyError};

/// Index into the finite class alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub usize);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}", self.0)
    }
}

/// The age-free part of a customer: its class and its destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Letter {
    pub class: ClassId,
    pub dest: NodeId,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueueError {
    #[error("operation needs a nonempty queue")]
    EmptyQueue,
    #[error("arriving customer has nonzero attained service {0}")]
    NonZeroAge(f64),
    #[error("no class transition for class {class} on {from} -> {to}")]
    MissingEntry {
        class: ClassId,
        from: NodeId,
        to: NodeId,
    },
    #[error("class transition given for non-adjacent nodes {0} -> {1}")]
    NotAnEdge(NodeId, NodeId),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Customer {
    pub class: ClassId,
    pub dest: NodeId,
    /// Attained service time.
    pub age: f64,
    /// Total service demand at the current server, when sampled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requirement: Option<f64>,
}

impl Customer {
    pub fn new(class: ClassId, dest: NodeId) -> Self {
        Customer {
            class,
            dest,
            age: 0.0,
            requirement: None,
        }
    }

    pub fn letter(&self) -> Letter {
        Letter {
            class: self.class,
            dest: self.dest,
        }
    }

    /// Service still owed, if a requirement was sampled.
    pub fn remaining(&self) -> Option<f64> {
        self.requirement.map(|r| (r - self.age).max(0.0))
    }
}

impl From<Letter> for Customer {
    fn from(l: Letter) -> Self {
        Customer::new(l.class, l.dest)
    }
}

/// Customers waiting at one server, oldest arrival first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QueueState {
    pub customers: Vec<Customer>,
}

impl QueueState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_letters(letters: &[Letter]) -> Self {
        QueueState {
            customers: letters.iter().map(|&l| l.into()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.customers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.customers.is_empty()
    }

    pub fn letters(&self) -> impl Iterator<Item = Letter> + '_ {
        self.customers.iter().map(Customer::letter)
    }

    /// Position of the customer in service at `node`.
    pub fn select_in_service(&self, discipline: &Discipline) -> Result<usize, QueueError> {
        discipline
            .select(&self.customers)
            .ok_or(QueueError::EmptyQueue)
    }

    /// Appends an external or transit arrival at the back of the queue.
    pub fn append_arrival(&mut self, customer: Customer) -> Result<(), QueueError> {
        if customer.age != 0.0 {
            return Err(QueueError::NonZeroAge(customer.age));
        }
        self.customers.push(customer);
        Ok(())
    }

    /// Value-returning form of [`append_arrival`](Self::append_arrival).
    pub fn with_arrival(&self, customer: Customer) -> Result<QueueState, QueueError> {
        let mut q = self.clone();
        q.append_arrival(customer)?;
        Ok(q)
    }

    /// Deletes the customer in service, keeping the order of the others.
    pub fn remove_in_service(&mut self, discipline: &Discipline) -> Result<Customer, QueueError> {
        let i = self.select_in_service(discipline)?;
        Ok(self.customers.remove(i))
    }

    /// Value-returning form of [`remove_in_service`](Self::remove_in_service).
    /// The empty queue maps to itself.
    pub fn without_in_service(&self, discipline: &Discipline) -> QueueState {
        let mut q = self.clone();
        let _ = q.remove_in_service(discipline);
        q
    }

    /// Advances the attained service of the customer in service.
    pub fn advance(&mut self, dt: f64, discipline: &Discipline) {
        if dt > 0.0 {
            if let Ok(i) = self.select_in_service(discipline) {
                self.customers[i].age += dt;
            }
        }
    }
}

/// Where a customer goes once its service at the current node is complete.
#[derive(Debug, Clone, PartialEq)]
pub enum TransferOutcome {
    /// The destination was at most one hop away; the customer left the network.
    Exit(Customer),
    /// The customer moves to `to` as a fresh arrival (new class, zero age).
    Forward { to: NodeId, customer: Customer },
}

/// Routing decision for a served customer leaving `node`.
pub fn route_served<R: Rng + ?Sized>(
    served: Customer,
    node: NodeId,
    graph: &Graph,
    transitions: &ClassTransitionTable,
    rng: &mut R,
) -> Result<TransferOutcome, QueueError> {
    if graph.dist(node, served.dest) <= 1 {
        return Ok(TransferOutcome::Exit(served));
    }
    let cands = graph.routing_candidates(node, served.dest)?;
    let to = if cands.len() == 1 {
        cands[0]
    } else {
        cands[rng.random_range(0..cands.len())]
    };
    let class = transitions.get(served.class, node, to)?;
    Ok(TransferOutcome::Forward {
        to,
        customer: Customer::new(class, served.dest),
    })
}

/// Completes the service in progress at `node`: removes the served customer
/// from `queue` and decides whether it exits or moves on. The caller appends
/// a forwarded customer to the target queue.
pub fn transfer<R: Rng + ?Sized>(
    queue: &mut QueueState,
    discipline: &Discipline,
    node: NodeId,
    graph: &Graph,
    transitions: &ClassTransitionTable,
    rng: &mut R,
) -> Result<TransferOutcome, QueueError> {
    let served = queue.remove_in_service(discipline)?;
    route_served(served, node, graph, transitions, rng)
}
