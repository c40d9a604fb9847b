//! Steering a regular graph's ASPL into a target interval with
//! degree-preserving double-edge swaps.
//!
//! A swap picks two distinct nodes `a`, `b` and one neighbor of each, `a'`
//! and `b'`, all four distinct. Edges `(a, a')`, `(b, b')` are replaced by
//! `(a, b')`, `(b, a')`, so every degree is preserved. Acceptance is greedy
//! and one-directional: below the interval only ASPL-increasing swaps are
//! kept, at or above it only decreasing ones. Swaps that disconnect the
//! graph, that would create a parallel edge, or that jump clean over the
//! interval are rejected. Every candidate counts against the swap budget.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{self, BfsScratch, GraphError, RelationalGraph};
use crate::rng;

pub const DEFAULT_MAX_SWAPS: u64 = 10_000;
pub const DEFAULT_RESTART_FACTOR: usize = 50;

#[derive(Debug, Error)]
pub enum RegulateError {
    #[error("invalid ASPL target: {0}")]
    InvalidTarget(String),
    #[error("input graph must be connected and regular")]
    InvalidGraph,
    #[error("ASPL still {aspl:.4} after {attempts} swap attempts; target {target}")]
    RegulationExhausted {
        attempts: u64,
        aspl: f64,
        target: AsplTarget,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Half-open ASPL interval `[lower, upper)` plus a swap budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsplTarget {
    pub lower: f64,
    pub upper: f64,
    pub max_swaps: u64,
}

impl AsplTarget {
    pub fn new(lower: f64, upper: f64, max_swaps: u64) -> Result<Self, RegulateError> {
        let t = Self {
            lower,
            upper,
            max_swaps,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), RegulateError> {
        if !(self.lower.is_finite() && self.upper.is_finite()) {
            return Err(RegulateError::InvalidTarget("bounds must be finite".into()));
        }
        if self.lower < 1.0 {
            return Err(RegulateError::InvalidTarget(format!(
                "lower bound {} below 1",
                self.lower
            )));
        }
        if self.upper <= self.lower {
            return Err(RegulateError::InvalidTarget(format!(
                "empty interval [{}, {})",
                self.lower, self.upper
            )));
        }
        if self.max_swaps == 0 {
            return Err(RegulateError::InvalidTarget("max_swaps must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, d: f64) -> bool {
        self.lower <= d && d < self.upper
    }

    /// Bin label used in file names, e.g. `3-5`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.lower, self.upper)
    }
}

impl fmt::Display for AsplTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.lower, self.upper)
    }
}

#[derive(Debug, Clone)]
pub struct Regulation {
    pub graph: RelationalGraph,
    pub initial_aspl: f64,
    pub final_aspl: f64,
    /// Candidate swaps examined, including rejected ones.
    pub attempts: u64,
    /// ASPL after each accepted swap, in order.
    pub trajectory: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Up,
    Down,
}

/// Rewires `g` until its ASPL lies in `target`, or fails after
/// `target.max_swaps` candidate swaps.
pub fn regulate_aspl(
    g: &RelationalGraph,
    target: &AsplTarget,
    seed: u64,
) -> Result<Regulation, RegulateError> {
    target.validate()?;
    if g.regular_degree().is_none() || !graph::is_connected(g) {
        return Err(RegulateError::InvalidGraph);
    }
    let n = g.node_count();
    let initial = graph::aspl(g)?;
    if target.contains(initial) {
        return Ok(Regulation {
            graph: g.clone(),
            initial_aspl: initial,
            final_aspl: initial,
            attempts: 0,
            trajectory: Vec::new(),
        });
    }
    let direction = if initial < target.lower {
        Direction::Up
    } else {
        Direction::Down
    };

    let mut lists = g.adjacency_lists();
    let mut adj: Vec<bool> = (0..n * n).map(|ix| g.has_edge(ix / n, ix % n)).collect();
    let mut bfs = BfsScratch::new(n);
    let mut rng = rng::seeded(seed);
    let mut current = initial;
    let mut trajectory = Vec::new();

    // Swap attempts are counted globally; the counter never resets.
    for attempt in 1..=target.max_swaps {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let ia = rng.random_range(0..lists[a].len());
        let ib = rng.random_range(0..lists[b].len());
        let (a2, b2) = (lists[a][ia], lists[b][ib]);
        if a2 == b || b2 == a || a2 == b2 {
            continue;
        }
        if adj[a * n + b2] || adj[b * n + a2] {
            continue;
        }

        apply_swap(&mut lists, &mut adj, n, (a, a2), (b, b2));
        let accepted = match (bfs.aspl(&lists), direction) {
            (Some(d), Direction::Up) if d > current && d < target.upper => Some(d),
            (Some(d), Direction::Down) if d < current && d >= target.lower => Some(d),
            _ => None,
        };
        let Some(d) = accepted else {
            // Undo: (a, b2), (b, a2) back to (a, a2), (b, b2).
            apply_swap(&mut lists, &mut adj, n, (a, b2), (b, a2));
            continue;
        };
        current = d;
        trajectory.push(d);
        if target.contains(current) {
            let edges: Vec<_> = (0..n)
                .flat_map(|i| lists[i].iter().filter(move |&&j| i < j).map(move |&j| (i, j)))
                .collect();
            let out = RelationalGraph::from_edges(n, &edges, g.seed())?;
            return Ok(Regulation {
                graph: out,
                initial_aspl: initial,
                final_aspl: current,
                attempts: attempt,
                trajectory,
            });
        }
    }
    Err(RegulateError::RegulationExhausted {
        attempts: target.max_swaps,
        aspl: current,
        target: *target,
    })
}

/// Replaces edges `(a, a2)`, `(b, b2)` with `(a, b2)`, `(b, a2)`.
fn apply_swap(
    lists: &mut [Vec<usize>],
    adj: &mut [bool],
    n: usize,
    (a, a2): (usize, usize),
    (b, b2): (usize, usize),
) {
    let replace = |list: &mut Vec<usize>, old: usize, new: usize| {
        let pos = list.iter().position(|&x| x == old).expect("edge present");
        list[pos] = new;
    };
    replace(&mut lists[a], a2, b2);
    replace(&mut lists[a2], a, b);
    replace(&mut lists[b], b2, a2);
    replace(&mut lists[b2], b, a);
    for (u, v, present) in [(a, a2, false), (b, b2, false), (a, b2, true), (b, a2, true)] {
        adj[u * n + v] = present;
        adj[v * n + u] = present;
    }
}

/// Smallest ASPL any `k`-regular graph on `n` nodes can have: every node sees
/// at most `k (k-1)^(d-1)` others at distance `d`.
pub fn aspl_lower_bound(n: usize, k: usize) -> f64 {
    if n < 2 || k == 0 {
        return f64::INFINITY;
    }
    let mut remaining = n - 1;
    let mut level_cap = k;
    let mut depth = 1u64;
    let mut sum = 0u64;
    while remaining > 0 {
        if level_cap == 0 {
            return f64::INFINITY;
        }
        let here = level_cap.min(remaining);
        sum += depth * here as u64;
        remaining -= here;
        depth += 1;
        level_cap = level_cap.saturating_mul(k - 1);
    }
    sum as f64 / (n - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchOptions {
    pub max_tries: u64,
    /// Fresh random graphs allowed per bin, as a multiple of `per_bin`.
    pub restart_factor: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            max_tries: graph::DEFAULT_MAX_TRIES,
            restart_factor: DEFAULT_RESTART_FACTOR,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BinResult {
    pub target: AsplTarget,
    pub graphs: Vec<RelationalGraph>,
    pub restarts: usize,
    /// True when the bin lies entirely below the ASPL lower bound.
    pub infeasible: bool,
}

impl BinResult {
    pub fn is_filled(&self, per_bin: usize) -> bool {
        self.graphs.len() >= per_bin
    }
}

/// Fills each target bin with up to `per_bin` regulated graphs.
///
/// Each bin draws fresh random graphs and regulates them, up to
/// `per_bin * restart_factor` restarts. Bins that cannot be filled are
/// logged and returned underfilled.
pub fn batch_generate(
    n: usize,
    k: usize,
    targets: &[AsplTarget],
    per_bin: usize,
    seed: u64,
    options: &BatchOptions,
) -> Result<Vec<BinResult>, RegulateError> {
    if per_bin == 0 {
        return Err(RegulateError::InvalidTarget("per_bin must be at least 1".into()));
    }
    for t in targets {
        t.validate()?;
    }
    check_disjoint(targets)?;
    // Surface infeasible (n, k) before spawning work.
    if k == 0 || k >= n || (n * k) % 2 == 1 {
        return Err(GraphError::InfeasibleDegree { n, k }.into());
    }

    let bound = aspl_lower_bound(n, k);
    let results = targets
        .par_iter()
        .enumerate()
        .map(|(bin, target)| fill_bin(n, k, target, bin as u64, per_bin, seed, options, bound))
        .collect::<Result<Vec<_>, _>>()?;
    for r in &results {
        if r.infeasible {
            log::warn!(
                "bin {} unreachable: ASPL of a {k}-regular graph on {n} nodes is at least {bound:.4}",
                r.target
            );
        } else if !r.is_filled(per_bin) {
            log::warn!(
                "bin {} underfilled: {} of {per_bin} graphs after {} restarts",
                r.target,
                r.graphs.len(),
                r.restarts
            );
        }
    }
    Ok(results)
}

#[allow(clippy::too_many_arguments)]
fn fill_bin(
    n: usize,
    k: usize,
    target: &AsplTarget,
    bin: u64,
    per_bin: usize,
    seed: u64,
    options: &BatchOptions,
    bound: f64,
) -> Result<BinResult, RegulateError> {
    let mut result = BinResult {
        target: *target,
        graphs: Vec::new(),
        restarts: 0,
        infeasible: bound >= target.upper,
    };
    if result.infeasible {
        return Ok(result);
    }
    let bin_seed = rng::derive_seed(seed, bin);
    let budget = per_bin.saturating_mul(options.restart_factor.max(1));
    while result.graphs.len() < per_bin && result.restarts < budget {
        let restart = result.restarts as u64;
        result.restarts += 1;
        let graph_seed = rng::derive_seed(bin_seed, 2 * restart);
        let swap_seed = rng::derive_seed(bin_seed, 2 * restart + 1);
        let fresh = match graph::generate_regular_graph(n, k, graph_seed, options.max_tries) {
            Ok(g) => g,
            Err(GraphError::GenerationExhausted { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        match regulate_aspl(&fresh, target, swap_seed) {
            Ok(reg) => result.graphs.push(reg.graph),
            Err(RegulateError::RegulationExhausted { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(result)
}

fn check_disjoint(targets: &[AsplTarget]) -> Result<(), RegulateError> {
    let mut sorted: Vec<_> = targets.to_vec();
    sorted.sort_by(|a, b| a.lower.total_cmp(&b.lower));
    for w in sorted.windows(2) {
        if w[1].lower < w[0].upper {
            return Err(RegulateError::InvalidTarget(format!(
                "bins {} and {} overlap",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

pub fn graph_file_name(n: usize, k: usize, target: &AsplTarget, index: usize) -> String {
    format!("n{n}_k{k}_bin{}_{index}.json", target.label())
}

/// Writes every graph of every bin into `dir`, returning the paths written.
pub fn write_batch(dir: &Path, n: usize, k: usize, bins: &[BinResult]) -> Result<Vec<PathBuf>, GraphError> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for bin in bins {
        for (i, g) in bin.graphs.iter().enumerate() {
            let path = dir.join(graph_file_name(n, k, &bin.target, i));
            g.save(&path)?;
            paths.push(path);
        }
    }
    Ok(paths)
}
