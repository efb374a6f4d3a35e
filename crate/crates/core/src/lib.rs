//! Queueing networks whose servers swap positions on a graph.
//!
//! The crate contains an exact event-driven simulator of the `N`-fold
//! mean-field network ([`network`]), two solvers for its `N -> ∞` limit
//! (an ODE on truncated queue words for exponential services in [`ode`], and
//! an ensemble fixed-point solver for general services in [`picard`]),
//! generator evaluations for the finite and limit dynamics ([`generators`]),
//! and the experiment harness that ties them together ([`harness`]).

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod exec;
pub mod generators;
pub mod harness;
pub mod model;
pub mod network;
pub mod ode;
pub mod picard;
pub mod queue;
pub mod topology;

pub use exec::Execution;
pub use model::{ArrivalTable, InitialLaw, Model, QueueLaw};
pub use queue::{ClassId, Customer, Discipline, Letter, QueueState, ServiceLaw};
pub use topology::{Graph, GraphSpec, NodeId};
