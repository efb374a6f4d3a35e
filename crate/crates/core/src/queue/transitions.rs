use std::collections::HashMap;

use super::{ClassId, QueueError};
use crate::topology::{Graph, NodeId};

/// New class of a customer moving along a directed edge after service.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassTransitionTable {
    table: HashMap<(ClassId, NodeId, NodeId), ClassId>,
}

impl ClassTransitionTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every class keeps its class on every directed edge of `graph`.
    pub fn identity(n_classes: usize, graph: &Graph) -> Self {
        let mut table = HashMap::new();
        for v in graph.nodes() {
            for &(u, _) in graph.neighbors(v) {
                for k in 0..n_classes {
                    table.insert((ClassId(k), v, u), ClassId(k));
                }
            }
        }
        ClassTransitionTable { table }
    }

    /// Sets the class given to `class` when it moves `from -> to`, which must be an edge of `graph`.
    pub fn set(
        &mut self,
        graph: &Graph,
        class: ClassId,
        from: NodeId,
        to: NodeId,
        new_class: ClassId,
    ) -> Result<(), QueueError> {
        if !graph.are_adjacent(from, to) {
            return Err(QueueError::NotAnEdge(from, to));
        }
        self.table.insert((class, from, to), new_class);
        Ok(())
    }

    pub fn get(&self, class: ClassId, from: NodeId, to: NodeId) -> Result<ClassId, QueueError> {
        self.table
            .get(&(class, from, to))
            .copied()
            .ok_or(QueueError::MissingEntry { class, from, to })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}
