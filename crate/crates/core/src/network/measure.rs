use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::queue::{Letter, QueueState};
use crate::topology::NodeId;

/// How much of a queue is kept when comparing distributions: the first
/// `depth` letters and the length capped at `cap`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DescriptorSpace {
    pub depth: usize,
    pub cap: usize,
}

impl Default for DescriptorSpace {
    fn default() -> Self {
        DescriptorSpace { depth: 1, cap: 8 }
    }
}

/// Truncated queue descriptor. `Overflow` collects mass that a truncated
/// solver could not resolve.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Descriptor {
    Queue { len: usize, prefix: Vec<Letter> },
    Overflow,
}

impl DescriptorSpace {
    pub fn describe_letters(&self, letters: &[Letter]) -> Descriptor {
        Descriptor::Queue {
            len: letters.len().min(self.cap),
            prefix: letters.iter().take(self.depth).copied().collect(),
        }
    }

    pub fn describe(&self, q: &QueueState) -> Descriptor {
        let letters: Vec<Letter> = q.letters().take(self.depth).collect();
        Descriptor::Queue {
            len: q.len().min(self.cap),
            prefix: letters,
        }
    }
}

/// Probability distribution over descriptors of one space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorDist {
    pub space: DescriptorSpace,
    pub probs: BTreeMap<Descriptor, f64>,
}

impl DescriptorDist {
    pub fn new(space: DescriptorSpace) -> Self {
        DescriptorDist {
            space,
            probs: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, d: Descriptor, w: f64) {
        *self.probs.entry(d).or_insert(0.0) += w;
    }

    pub fn from_queues<'a>(
        space: DescriptorSpace,
        queues: impl IntoIterator<Item = &'a QueueState>,
    ) -> Self {
        let mut dist = DescriptorDist::new(space);
        let mut n = 0usize;
        for q in queues {
            dist.add(space.describe(q), 1.0);
            n += 1;
        }
        if n > 0 {
            dist.scale(1.0 / n as f64);
        }
        dist
    }

    pub fn scale(&mut self, factor: f64) {
        for p in self.probs.values_mut() {
            *p *= factor;
        }
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }

    /// Marginal of the capped queue length, indices `0..=cap`.
    pub fn length_histogram(&self) -> Vec<f64> {
        let mut h = vec![0.0; self.space.cap + 1];
        for (d, p) in &self.probs {
            match d {
                Descriptor::Queue { len, .. } => h[*len] += p,
                Descriptor::Overflow => h[self.space.cap] += p,
            }
        }
        h
    }

    /// Mean of several distributions over the same space.
    pub fn average<'a>(
        space: DescriptorSpace,
        dists: impl IntoIterator<Item = &'a DescriptorDist>,
    ) -> Self {
        let mut out = DescriptorDist::new(space);
        let mut n = 0usize;
        for d in dists {
            for (k, p) in &d.probs {
                out.add(k.clone(), *p);
            }
            n += 1;
        }
        if n > 0 {
            out.scale(1.0 / n as f64);
        }
        out
    }
}

/// The `N` queue states at one node, each an atom of weight `1/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    pub node: NodeId,
    pub atoms: Vec<QueueState>,
}

impl EmpiricalMeasure {
    pub fn weight(&self) -> f64 {
        1.0 / self.atoms.len() as f64
    }

    /// Probability that the queue length equals `len`.
    pub fn prob_len(&self, len: usize) -> f64 {
        self.atoms.iter().filter(|q| q.len() == len).count() as f64 * self.weight()
    }

    pub fn descriptors(&self, space: DescriptorSpace) -> DescriptorDist {
        DescriptorDist::from_queues(space, &self.atoms)
    }
}
