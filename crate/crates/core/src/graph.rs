//! Relational graphs: undirected simple graphs over channel groups.
//!
//! Adjacency is stored densely (row-major `n × n` booleans). Graphs used for
//! masking are small, at most [`MAX_NODES`] nodes, so dense storage keeps
//! mask construction a direct lookup.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng;

pub const MAX_NODES: usize = 256;

/// Default attempt budget for [`generate_regular_graph`].
pub const DEFAULT_MAX_TRIES: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("no simple {k}-regular graph on {n} nodes (need n*k even and 1 <= k <= n-1)")]
    InfeasibleDegree { n: usize, k: usize },
    #[error("no connected simple realization found in {tries} attempts")]
    GenerationExhausted { tries: u64 },
    #[error("graph is disconnected")]
    Disconnected,
    #[error("graph needs at least {min} nodes, got {n}")]
    TooFewNodes { n: usize, min: usize },
    #[error("graph has {n} nodes; at most {max} supported", max = MAX_NODES)]
    TooManyNodes { n: usize },
    #[error("invalid edge ({0}, {1})")]
    InvalidEdge(usize, usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("graph file invalid: {0}")]
    InvalidFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Undirected simple graph with dense adjacency.
#[derive(Clone, PartialEq, Eq)]
pub struct RelationalGraph {
    n: usize,
    adj: Vec<bool>,
    edge_count: usize,
    seed: u64,
}

impl fmt::Debug for RelationalGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RelationalGraph")
            .field("n", &self.n)
            .field("edges", &self.edges())
            .field("seed", &self.seed)
            .finish()
    }
}

impl RelationalGraph {
    /// Builds a graph from an edge list. Self-loops, duplicates and
    /// out-of-range endpoints are rejected; regularity is not required.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], seed: u64) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::TooFewNodes { n, min: 1 });
        }
        if n > MAX_NODES {
            return Err(GraphError::TooManyNodes { n });
        }
        let mut adj = vec![false; n * n];
        for &(i, j) in edges {
            if i == j || i >= n || j >= n {
                return Err(GraphError::InvalidEdge(i, j));
            }
            if adj[i * n + j] {
                return Err(GraphError::DuplicateEdge(i.min(j), i.max(j)));
            }
            adj[i * n + j] = true;
            adj[j * n + i] = true;
        }
        Ok(Self {
            n,
            adj,
            edge_count: edges.len(),
            seed,
        })
    }

    pub fn complete(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        Self::from_edges(n, &edges, 0)
    }

    pub fn cycle(n: usize) -> Result<Self, GraphError> {
        if n < 3 {
            return Err(GraphError::TooFewNodes { n, min: 3 });
        }
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Self::from_edges(n, &edges, 0)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj[i * self.n..(i + 1) * self.n]
            .iter()
            .enumerate()
            .filter_map(|(j, &a)| a.then_some(j))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i * self.n..(i + 1) * self.n]
            .iter()
            .filter(|&&a| a)
            .count()
    }

    /// The common degree when every node has the same degree.
    pub fn regular_degree(&self) -> Option<usize> {
        let k = self.degree(0);
        (1..self.n).all(|i| self.degree(i) == k).then_some(k)
    }

    /// Edges as `(i, j)` with `i < j`, sorted lexicographically.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count);
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        (0..self.n).map(|i| self.neighbors(i).collect()).collect()
    }

    pub fn metrics(&self) -> Result<GraphMetrics, GraphError> {
        Ok(GraphMetrics {
            average_degree: average_degree(self),
            aspl: aspl(self)?,
            pruning_rate: pruning_rate(self),
        })
    }

    /// Serializes to the graph file format. Fails if the graph is not
    /// regular or not connected, since the format records `k` and `aspl`.
    pub fn to_file(&self) -> Result<GraphFile, GraphError> {
        let k = self
            .regular_degree()
            .ok_or_else(|| GraphError::InvalidFile("graph is not regular".into()))?;
        Ok(GraphFile {
            n: self.n,
            k,
            seed: self.seed,
            aspl: aspl(self)?,
            edges: self.edges().into_iter().map(|(i, j)| [i, j]).collect(),
        })
    }

    pub fn to_json(&self) -> Result<String, GraphError> {
        let file = self.to_file()?;
        serde_json::to_string(&file).map_err(|e| GraphError::InvalidFile(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let file: GraphFile =
            serde_json::from_str(text).map_err(|e| GraphError::InvalidFile(e.to_string()))?;
        file.into_graph()
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn content_hash(&self) -> Result<String, GraphError> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}

/// On-disk graph record. The edge list is authoritative; `n`, `k` and
/// `aspl` are checked against it when loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub aspl: f64,
    pub edges: Vec<[usize; 2]>,
}

impl GraphFile {
    pub fn into_graph(self) -> Result<RelationalGraph, GraphError> {
        let invalid = |msg: String| GraphError::InvalidFile(msg);
        for w in self.edges.windows(2) {
            if w[0] >= w[1] {
                return Err(invalid(format!("edges not sorted at {:?}", w[1])));
            }
        }
        if let Some(e) = self.edges.iter().find(|e| e[0] >= e[1]) {
            return Err(invalid(format!("edge {e:?} not in i<j order")));
        }
        let pairs: Vec<_> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        let g = RelationalGraph::from_edges(self.n, &pairs, self.seed)?;
        match g.regular_degree() {
            Some(k) if k == self.k => {}
            Some(k) => return Err(invalid(format!("declared k={} but edges give {k}", self.k))),
            None => return Err(invalid("edge list is not regular".into())),
        }
        let d = aspl(&g)?;
        if (d - self.aspl).abs() > 1e-9 {
            return Err(invalid(format!("declared aspl {} but edges give {d}", self.aspl)));
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphMetrics {
    pub average_degree: f64,
    pub aspl: f64,
    pub pruning_rate: f64,
}

/// `2M / N`.
pub fn average_degree(g: &RelationalGraph) -> f64 {
    2.0 * g.edge_count as f64 / g.n as f64
}

/// Fraction of channel blocks removed: `1 - k/N`.
pub fn pruning_rate(g: &RelationalGraph) -> f64 {
    1.0 - average_degree(g) / g.n as f64
}

/// True iff a breadth-first traversal from node 0 reaches every node.
pub fn is_connected(g: &RelationalGraph) -> bool {
    let mut seen = vec![false; g.n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut reached = 1;
    while let Some(u) = queue.pop_front() {
        for v in g.neighbors(u) {
            if !seen[v] {
                seen[v] = true;
                reached += 1;
                queue.push_back(v);
            }
        }
    }
    reached == g.n
}

/// Average shortest path length over all unordered node pairs.
pub fn aspl(g: &RelationalGraph) -> Result<f64, GraphError> {
    if g.n < 2 {
        return Err(GraphError::TooFewNodes { n: g.n, min: 2 });
    }
    let lists = g.adjacency_lists();
    let mut bfs = BfsScratch::new(g.n);
    bfs.aspl(&lists).ok_or(GraphError::Disconnected)
}

/// Reusable buffers for repeated all-pairs BFS over adjacency lists.
#[derive(Debug, Clone)]
pub struct BfsScratch {
    dist: Vec<u32>,
    queue: Vec<usize>,
}

impl BfsScratch {
    pub fn new(n: usize) -> Self {
        Self {
            dist: vec![u32::MAX; n],
            queue: Vec::with_capacity(n),
        }
    }

    /// Sum of distances from `src` to every node, or `None` if some node
    /// is unreachable.
    pub fn distance_sum(&mut self, lists: &[Vec<usize>], src: usize) -> Option<u64> {
        let n = lists.len();
        self.dist.clear();
        self.dist.resize(n, u32::MAX);
        self.queue.clear();
        self.dist[src] = 0;
        self.queue.push(src);
        let mut head = 0;
        let mut total = 0u64;
        while head < self.queue.len() {
            let u = self.queue[head];
            head += 1;
            let du = self.dist[u];
            total += u64::from(du);
            for &v in &lists[u] {
                if self.dist[v] == u32::MAX {
                    self.dist[v] = du + 1;
                    self.queue.push(v);
                }
            }
        }
        (self.queue.len() == n).then_some(total)
    }

    /// ASPL of the graph given by `lists`; `None` when disconnected.
    pub fn aspl(&mut self, lists: &[Vec<usize>]) -> Option<f64> {
        let n = lists.len();
        let mut ordered_sum = 0u64;
        for src in 0..n {
            ordered_sum += self.distance_sum(lists, src)?;
        }
        // ordered_sum counts every unordered pair twice.
        Some(ordered_sum as f64 / (n * (n - 1)) as f64)
    }
}

/// Random connected simple `k`-regular graph on `n` nodes.
///
/// Uses the pairing (configuration) model: `k` stubs per node are shuffled
/// and paired; draws with self-loops or parallel edges are rejected, as are
/// disconnected results. Each draw counts as one try. `k = n - 1` returns the
/// complete graph directly since it is the only realization.
pub fn generate_regular_graph(
    n: usize,
    k: usize,
    seed: u64,
    max_tries: u64,
) -> Result<RelationalGraph, GraphError> {
    if n > MAX_NODES {
        return Err(GraphError::TooManyNodes { n });
    }
    if k == 0 || k >= n || (n * k) % 2 == 1 {
        return Err(GraphError::InfeasibleDegree { n, k });
    }
    if k == n - 1 {
        let mut g = RelationalGraph::complete(n)?;
        g.seed = seed;
        return Ok(g);
    }
    let mut rng = rng::seeded(seed);
    let mut stubs: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let mut edges = Vec::with_capacity(n * k / 2);
    let mut adj = vec![false; n * n];
    'attempt: for _ in 0..max_tries {
        stubs.shuffle(&mut rng);
        edges.clear();
        adj.fill(false);
        for pair in stubs.chunks_exact(2) {
            let (a, b) = (pair[0], pair[1]);
            if a == b || adj[a * n + b] {
                continue 'attempt;
            }
            adj[a * n + b] = true;
            adj[b * n + a] = true;
            edges.push((a.min(b), a.max(b)));
        }
        let g = RelationalGraph::from_edges(n, &edges, seed)?;
        if is_connected(&g) {
            return Ok(g);
        }
    }
    Err(GraphError::GenerationExhausted { tries: max_tries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn petersen() -> RelationalGraph {
        let mut edges = Vec::new();
        for i in 0..5 {
            edges.push((i, (i + 1) % 5));
            edges.push((i, i + 5));
            edges.push((5 + i, 5 + (i + 2) % 5));
        }
        RelationalGraph::from_edges(10, &edges, 0).unwrap()
    }

    #[test]
    fn desk_setting_graph() {
        let g = generate_regular_graph(64, 3, 7, DEFAULT_MAX_TRIES).unwrap();
        assert_eq!(g.edge_count(), 96);
        assert_eq!(g.regular_degree(), Some(3));
        assert!(is_connected(&g));
        assert_eq!(pruning_rate(&g), 0.953125);
        assert_eq!(average_degree(&g), 3.0);
    }

    #[test]
    fn k4_is_unique_realization() {
        let g = generate_regular_graph(4, 3, 11, 100).unwrap();
        assert_eq!(g.edges(), RelationalGraph::complete(4).unwrap().edges());
    }

    #[test]
    fn odd_handshake_is_infeasible() {
        assert!(matches!(
            generate_regular_graph(5, 3, 0, 10),
            Err(GraphError::InfeasibleDegree { n: 5, k: 3 })
        ));
        assert!(matches!(
            generate_regular_graph(6, 0, 0, 10),
            Err(GraphError::InfeasibleDegree { .. })
        ));
        assert!(matches!(
            generate_regular_graph(6, 6, 0, 10),
            Err(GraphError::InfeasibleDegree { .. })
        ));
    }

    #[test]
    fn exhaustion_is_reported() {
        assert!(matches!(
            generate_regular_graph(8, 3, 0, 0),
            Err(GraphError::GenerationExhausted { tries: 0 })
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_regular_graph(64, 3, 99, DEFAULT_MAX_TRIES).unwrap();
        let b = generate_regular_graph(64, 3, 99, DEFAULT_MAX_TRIES).unwrap();
        let c = generate_regular_graph(64, 3, 100, DEFAULT_MAX_TRIES).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.edges(), c.edges());
    }

    #[test]
    fn average_degree_examples() {
        assert_eq!(average_degree(&petersen()), 3.0);
        assert_eq!(average_degree(&RelationalGraph::complete(4).unwrap()), 3.0);
    }

    #[test]
    fn complete_graph_pruning_rate() {
        let g = RelationalGraph::complete(8).unwrap();
        assert!((pruning_rate(&g) - 1.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn aspl_examples() {
        assert_eq!(aspl(&RelationalGraph::complete(7).unwrap()).unwrap(), 1.0);
        assert_eq!(aspl(&RelationalGraph::cycle(5).unwrap()).unwrap(), 1.5);
        assert_eq!(aspl(&RelationalGraph::cycle(6).unwrap()).unwrap(), 1.8);
        assert!((aspl(&petersen()).unwrap() - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn disconnected_graph() {
        let g = RelationalGraph::from_edges(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)], 0)
            .unwrap();
        assert!(!is_connected(&g));
        assert_eq!(g.regular_degree(), Some(2));
        assert!(matches!(aspl(&g), Err(GraphError::Disconnected)));
        assert!(is_connected(&RelationalGraph::complete(4).unwrap()));
        assert!(is_connected(&RelationalGraph::cycle(5).unwrap()));
    }

    #[test]
    fn rejects_malformed_edges() {
        assert!(matches!(
            RelationalGraph::from_edges(3, &[(0, 0)], 0),
            Err(GraphError::InvalidEdge(0, 0))
        ));
        assert!(matches!(
            RelationalGraph::from_edges(3, &[(0, 1), (1, 0)], 0),
            Err(GraphError::DuplicateEdge(0, 1))
        ));
        assert!(matches!(
            RelationalGraph::from_edges(3, &[(0, 3)], 0),
            Err(GraphError::InvalidEdge(0, 3))
        ));
        assert!(matches!(
            RelationalGraph::from_edges(300, &[], 0),
            Err(GraphError::TooManyNodes { .. })
        ));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let g = generate_regular_graph(16, 3, 5, 1000).unwrap();
        let text = g.to_json().unwrap();
        let back = RelationalGraph::from_json(&text).unwrap();
        assert_eq!(back, g);

        let mut file: GraphFile = serde_json::from_str(&text).unwrap();
        file.k = 4;
        assert!(file.clone().into_graph().is_err());
        file.k = 3;
        file.aspl += 0.5;
        assert!(file.clone().into_graph().is_err());
        file.aspl -= 0.5;
        file.edges.swap(0, 1);
        assert!(file.into_graph().is_err());
    }

    #[test]
    fn content_hash_tracks_edges() {
        let a = generate_regular_graph(16, 3, 5, 1000).unwrap();
        let b = generate_regular_graph(16, 3, 6, 1000).unwrap();
        assert_eq!(a.content_hash().unwrap().len(), 64);
        assert_eq!(a.content_hash().unwrap(), a.clone().content_hash().unwrap());
        assert_ne!(a.content_hash().unwrap(), b.content_hash().unwrap());
    }
}
