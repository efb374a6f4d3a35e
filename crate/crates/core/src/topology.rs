//! Finite connected graphs, hop distances and the greedy routing kernel.
//!
//! A [`Graph`] is immutable once built. All-pairs hop distances are computed
//! by BFS at construction and cached, so routing queries are table lookups.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense node index. Order follows the order nodes were listed in the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("graph has no nodes")]
    Empty,
    #[error("duplicate node name `{0}`")]
    DuplicateNode(String),
    #[error("edge references unknown node `{0}`")]
    UnknownNode(String),
    #[error("self-loop at node `{0}`")]
    SelfLoop(String),
    #[error("duplicate edge `{0}`-`{1}`")]
    DuplicateEdge(String, String),
    #[error("negative swap rate {rate} on edge `{a}`-`{b}`")]
    NegativeRate { a: String, b: String, rate: f64 },
    #[error("swap rate {rate} on edge `{a}`-`{b}` is not below the swap-rate bound {bound}")]
    SwapRateBoundExceeded {
        a: String,
        b: String,
        rate: f64,
        bound: f64,
    },
    #[error("node `{node}` has degree {degree}, above the degree bound {bound}")]
    DegreeBoundExceeded {
        node: String,
        degree: usize,
        bound: usize,
    },
    #[error("graph is disconnected: `{0}` is unreachable from `{1}`")]
    DisconnectedGraph(String, String),
    #[error("routing query with source equal to destination ({0})")]
    SameNode(NodeId),
    #[error(
        "destination {dest} is within one hop of {node}; the customer exits instead of routing"
    )]
    DestinationTooClose { node: NodeId, dest: NodeId },
}

/// One undirected edge of a graph description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub a: String,
    pub b: String,
    /// Swap rate between the servers at the two endpoints.
    #[serde(default)]
    pub beta: f64,
}

/// Adjacency description accepted by [`Graph::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub nodes: Vec<String>,
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
}

impl GraphSpec {
    /// Path `v0 - v1 - ... - v{n-1}` with a common swap rate.
    pub fn path(n: usize, beta: f64) -> Self {
        let nodes: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
        let edges = (1..n)
            .map(|i| EdgeSpec {
                a: nodes[i - 1].clone(),
                b: nodes[i].clone(),
                beta,
            })
            .collect();
        GraphSpec { nodes, edges }
    }

    /// `rows x cols` grid; node `(r,c)` is named `"r,c"`.
    pub fn grid(rows: usize, cols: usize, beta: f64) -> Self {
        let name = |r: usize, c: usize| format!("{r},{c}");
        let mut nodes = Vec::with_capacity(rows * cols);
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                nodes.push(name(r, c));
                if r + 1 < rows {
                    edges.push(EdgeSpec {
                        a: name(r, c),
                        b: name(r + 1, c),
                        beta,
                    });
                }
                if c + 1 < cols {
                    edges.push(EdgeSpec {
                        a: name(r, c),
                        b: name(r, c + 1),
                        beta,
                    });
                }
            }
        }
        GraphSpec { nodes, edges }
    }

    /// Cycle `v0 - v1 - ... - v{n-1} - v0`.
    pub fn cycle(n: usize, beta: f64) -> Self {
        let mut spec = Self::path(n, beta);
        if n > 2 {
            spec.edges.push(EdgeSpec {
                a: spec.nodes[n - 1].clone(),
                b: spec.nodes[0].clone(),
                beta,
            });
        }
        spec
    }
}

/// Optional bounds enforced at construction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GraphBounds {
    /// Strict upper bound on every swap rate.
    pub swap_rate: Option<f64>,
    pub max_degree: Option<usize>,
}

/// Hop distances between all node pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable {
    n: usize,
    dist: Vec<u32>,
}

impl DistanceTable {
    pub fn get(&self, a: NodeId, b: NodeId) -> u32 {
        self.dist[a.0 * self.n + b.0]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Edge with its swap rate, endpoints stored as `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: NodeId,
    pub b: NodeId,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct Graph {
    names: Vec<String>,
    index: HashMap<String, NodeId>,
    edges: Vec<Edge>,
    /// Per node: (neighbor, edge index), sorted by neighbor index.
    adjacency: Vec<Vec<(NodeId, usize)>>,
    distances: DistanceTable,
}

impl Graph {
    pub fn build(spec: &GraphSpec) -> Result<Self, TopologyError> {
        Self::build_with_bounds(spec, GraphBounds::default())
    }

    pub fn build_with_bounds(spec: &GraphSpec, bounds: GraphBounds) -> Result<Self, TopologyError> {
        if spec.nodes.is_empty() {
            return Err(TopologyError::Empty);
        }
        let mut index = HashMap::with_capacity(spec.nodes.len());
        for (i, name) in spec.nodes.iter().enumerate() {
            if index.insert(name.clone(), NodeId(i)).is_some() {
                return Err(TopologyError::DuplicateNode(name.clone()));
            }
        }
        let n = spec.nodes.len();
        let mut adjacency: Vec<Vec<(NodeId, usize)>> = vec![Vec::new(); n];
        let mut edges = Vec::with_capacity(spec.edges.len());
        let mut seen = HashSet::new();
        for e in &spec.edges {
            let a = *index
                .get(&e.a)
                .ok_or_else(|| TopologyError::UnknownNode(e.a.clone()))?;
            let b = *index
                .get(&e.b)
                .ok_or_else(|| TopologyError::UnknownNode(e.b.clone()))?;
            if a == b {
                return Err(TopologyError::SelfLoop(e.a.clone()));
            }
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if !seen.insert((lo, hi)) {
                return Err(TopologyError::DuplicateEdge(e.a.clone(), e.b.clone()));
            }
            if !(e.beta >= 0.0) {
                return Err(TopologyError::NegativeRate {
                    a: e.a.clone(),
                    b: e.b.clone(),
                    rate: e.beta,
                });
            }
            if let Some(bound) = bounds.swap_rate {
                if e.beta >= bound {
                    return Err(TopologyError::SwapRateBoundExceeded {
                        a: e.a.clone(),
                        b: e.b.clone(),
                        rate: e.beta,
                        bound,
                    });
                }
            }
            let idx = edges.len();
            edges.push(Edge {
                a: lo,
                b: hi,
                beta: e.beta,
            });
            adjacency[lo.0].push((hi, idx));
            adjacency[hi.0].push((lo, idx));
        }
        for adj in &mut adjacency {
            adj.sort_by_key(|&(w, _)| w);
        }
        if let Some(bound) = bounds.max_degree {
            for (i, adj) in adjacency.iter().enumerate() {
                if adj.len() > bound {
                    return Err(TopologyError::DegreeBoundExceeded {
                        node: spec.nodes[i].clone(),
                        degree: adj.len(),
                        bound,
                    });
                }
            }
        }
        let distances = all_pairs_bfs(&adjacency);
        for j in 1..n {
            if distances.dist[j] == u32::MAX {
                return Err(TopologyError::DisconnectedGraph(
                    spec.nodes[j].clone(),
                    spec.nodes[0].clone(),
                ));
            }
        }
        Ok(Graph {
            names: spec.nodes.clone(),
            index,
            edges,
            adjacency,
            distances,
        })
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.names.len()).map(NodeId)
    }

    pub fn name(&self, v: NodeId) -> &str {
        &self.names[v.0]
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.index.get(name).copied()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Neighbors of `v` with the index of the connecting edge.
    pub fn neighbors(&self, v: NodeId) -> &[(NodeId, usize)] {
        &self.adjacency[v.0]
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adjacency[v.0].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn are_adjacent(&self, a: NodeId, b: NodeId) -> bool {
        self.adjacency[a.0]
            .binary_search_by_key(&b, |&(w, _)| w)
            .is_ok()
    }

    /// Swap rate on edge `a`-`b`, zero for non-adjacent pairs.
    pub fn beta(&self, a: NodeId, b: NodeId) -> f64 {
        match self.adjacency[a.0].binary_search_by_key(&b, |&(w, _)| w) {
            Ok(pos) => self.edges[self.adjacency[a.0][pos].1].beta,
            Err(_) => 0.0,
        }
    }

    /// Total swap rate seen by the server at `v`.
    pub fn swap_rate_at(&self, v: NodeId) -> f64 {
        self.adjacency[v.0]
            .iter()
            .map(|&(_, e)| self.edges[e].beta)
            .sum()
    }

    pub fn distances(&self) -> &DistanceTable {
        &self.distances
    }

    pub fn dist(&self, a: NodeId, b: NodeId) -> u32 {
        self.distances.get(a, b)
    }

    /// Neighbors of `v` exactly one hop closer to `dest`.
    pub fn routing_candidates(
        &self,
        v: NodeId,
        dest: NodeId,
    ) -> Result<Vec<NodeId>, TopologyError> {
        if v == dest {
            return Err(TopologyError::SameNode(v));
        }
        let d = self.dist(v, dest);
        Ok(self.adjacency[v.0]
            .iter()
            .map(|&(w, _)| w)
            .filter(|&w| self.dist(w, dest) + 1 == d)
            .collect())
    }

    /// Greedy routing kernel: uniform over [`routing_candidates`](Self::routing_candidates).
    /// Only defined when `dest` is at least two hops away.
    pub fn routing_kernel(
        &self,
        v: NodeId,
        dest: NodeId,
    ) -> Result<Vec<(NodeId, f64)>, TopologyError> {
        if self.dist(v, dest) <= 1 {
            return Err(TopologyError::DestinationTooClose { node: v, dest });
        }
        let cands = self.routing_candidates(v, dest)?;
        let p = 1.0 / cands.len() as f64;
        Ok(cands.into_iter().map(|w| (w, p)).collect())
    }
}

fn all_pairs_bfs(adjacency: &[Vec<(NodeId, usize)>]) -> DistanceTable {
    let n = adjacency.len();
    let mut dist = vec![u32::MAX; n * n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        let row = &mut dist[s * n..(s + 1) * n];
        row[s] = 0;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &(w, _) in &adjacency[u] {
                if row[w.0] == u32::MAX {
                    row[w.0] = row[u] + 1;
                    queue.push_back(w.0);
                }
            }
        }
    }
    DistanceTable { n, dist }
}
