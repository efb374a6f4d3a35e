use serde::{Deserialize, Serialize};

use super::Customer;

/// Rule choosing which customer of a nonempty queue is served.
///
/// All rules are conservative (a nonempty queue always serves somebody) and
/// serve exactly one customer at a time. Preempted customers keep their
/// attained service and resume later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Discipline {
    Fifo,
    LifoPreemptResume,
    /// Smaller rank is served first; ties go to the earliest arrival.
    /// `ranks` is indexed by class.
    StaticPriority {
        ranks: Vec<u32>,
        preemptive: bool,
    },
}

impl Discipline {
    /// Index of the customer in service, `None` for an empty queue.
    ///
    /// Under non-preemptive priority the customer already holding the server
    /// (the one with positive attained service) keeps it.
    pub fn select(&self, customers: &[Customer]) -> Option<usize> {
        if customers.is_empty() {
            return None;
        }
        match self {
            Discipline::Fifo => Some(0),
            Discipline::LifoPreemptResume => Some(customers.len() - 1),
            Discipline::StaticPriority { ranks, preemptive } => {
                if !preemptive {
                    if let Some(i) = customers.iter().position(|c| c.age > 0.0) {
                        return Some(i);
                    }
                }
                let rank = |i: usize| ranks.get(customers[i].class.0).copied().unwrap_or(u32::MAX);
                (0..customers.len()).min_by_key(|&i| (rank(i), i))
            }
        }
    }

    /// Whether the choice is a function of the class/destination word alone,
    /// i.e. does not look at attained service.
    pub fn is_word_function(&self) -> bool {
        !matches!(
            self,
            Discipline::StaticPriority {
                preemptive: false,
                ..
            }
        )
    }
}
