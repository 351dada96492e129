//! Network graphs and left-stochastic combination matrices.
//!
//! Nodes are indexed from 0 inside the library. The plain-text edge-list
//! format ([`NetworkTopology::to_edge_list`]) is 1-indexed.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Absolute tolerance for column-sum checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Placement attempts made by [`random_geometric_topology`] before giving up.
pub const GEOMETRIC_RETRY_BUDGET: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("network must have at least one node")]
    Empty,
    #[error("invalid edge ({0}, {1}) for a network of {2} nodes")]
    InvalidEdge(usize, usize, usize),
    #[error("graph is disconnected ({components} components)")]
    DisconnectedGraph { components: usize },
    #[error("radius {0} outside (0, sqrt(2)]")]
    InvalidRadius(f64),
    #[error("no connected placement found after {0} attempts")]
    ConnectivityFailure(usize),
    #[error("edge list parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("combination matrix is {rows}x{cols}, expected {n}x{n}")]
    DimensionMismatch { rows: usize, cols: usize, n: usize },
}

/// Undirected, connected graph with closed neighborhoods.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTopology {
    n_nodes: usize,
    edges: BTreeSet<(usize, usize)>,
    neighborhoods: Vec<Vec<usize>>,
}

impl NetworkTopology {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Edges as `(lo, hi)` pairs with `lo < hi`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Sorted closed neighborhood of `k` (contains `k` itself).
    pub fn neighborhood(&self, k: usize) -> &[usize] {
        &self.neighborhoods[k]
    }

    /// `|N_k|`, counting the node itself.
    pub fn degree(&self, k: usize) -> usize {
        self.neighborhoods[k].len()
    }

    pub fn are_neighbors(&self, a: usize, b: usize) -> bool {
        a == b || self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Serialize as `N <count>` followed by one 1-indexed `u v` pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("N {}\n", self.n_nodes);
        for (a, b) in &self.edges {
            let _ = writeln!(out, "{} {}", a + 1, b + 1);
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self, TopologyError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (line, header) = lines.next().ok_or(TopologyError::Parse {
            line: 1,
            message: "missing `N <count>` header".into(),
        })?;
        let mut parts = header.split_whitespace();
        let n = match (parts.next(), parts.next(), parts.next()) {
            (Some("N"), Some(count), None) => count.parse::<usize>().map_err(|e| TopologyError::Parse {
                line,
                message: format!("bad node count: {e}"),
            })?,
            _ => {
                return Err(TopologyError::Parse {
                    line,
                    message: "expected `N <count>`".into(),
                })
            }
        };
        let mut edges = Vec::new();
        for (line, l) in lines {
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(TopologyError::Parse {
                    line,
                    message: format!("expected `u v`, got `{l}`"),
                });
            }
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|e| TopologyError::Parse {
                    line,
                    message: format!("bad node index `{s}`: {e}"),
                })
            };
            let (u, v) = (parse(fields[0])?, parse(fields[1])?);
            if u == 0 || v == 0 {
                return Err(TopologyError::InvalidEdge(u, v, n));
            }
            edges.push((u - 1, v - 1));
        }
        build_topology(n, &edges)
    }
}

/// Build a topology from 0-indexed undirected edges.
///
/// Duplicate edges (in either orientation) collapse to one.
pub fn build_topology(n_nodes: usize, edges: &[(usize, usize)]) -> Result<NetworkTopology, TopologyError> {
    if n_nodes == 0 {
        return Err(TopologyError::Empty);
    }
    let mut set = BTreeSet::new();
    for &(a, b) in edges {
        if a >= n_nodes || b >= n_nodes || a == b {
            return Err(TopologyError::InvalidEdge(a, b, n_nodes));
        }
        set.insert((a.min(b), a.max(b)));
    }
    let mut neighborhoods: Vec<Vec<usize>> = (0..n_nodes).map(|k| vec![k]).collect();
    for &(a, b) in &set {
        neighborhoods[a].push(b);
        neighborhoods[b].push(a);
    }
    for nb in &mut neighborhoods {
        nb.sort_unstable();
    }
    let components = count_components(&neighborhoods);
    if components != 1 {
        return Err(TopologyError::DisconnectedGraph { components });
    }
    Ok(NetworkTopology {
        n_nodes,
        edges: set,
        neighborhoods,
    })
}

fn count_components(neighborhoods: &[Vec<usize>]) -> usize {
    let n = neighborhoods.len();
    let mut seen = vec![false; n];
    let mut components = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(k) = queue.pop_front() {
            for &l in &neighborhoods[k] {
                if !seen[l] {
                    seen[l] = true;
                    queue.push_back(l);
                }
            }
        }
    }
    components
}

/// Path graph `0 - 1 - ... - (n-1)`.
pub fn path_topology(n_nodes: usize) -> Result<NetworkTopology, TopologyError> {
    let edges: Vec<_> = (1..n_nodes).map(|k| (k - 1, k)).collect();
    build_topology(n_nodes, &edges)
}

/// Complete graph on `n_nodes` nodes.
pub fn complete_topology(n_nodes: usize) -> Result<NetworkTopology, TopologyError> {
    let mut edges = Vec::new();
    for a in 0..n_nodes {
        for b in a + 1..n_nodes {
            edges.push((a, b));
        }
    }
    build_topology(n_nodes, &edges)
}

/// Random geometric graph in the unit square.
///
/// Nodes are placed uniformly; an edge joins every pair within Euclidean
/// distance `radius`. Placements are redrawn from the same seeded generator
/// until the graph is connected.
pub fn random_geometric_topology(n_nodes: usize, radius: f64, seed: u64) -> Result<NetworkTopology, TopologyError> {
    if n_nodes == 0 {
        return Err(TopologyError::Empty);
    }
    if !(radius > 0.0 && radius <= std::f64::consts::SQRT_2) {
        return Err(TopologyError::InvalidRadius(radius));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r2 = radius * radius;
    for _ in 0..GEOMETRIC_RETRY_BUDGET {
        let points: Vec<(f64, f64)> = (0..n_nodes).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
        let mut edges = Vec::new();
        for a in 0..n_nodes {
            for b in a + 1..n_nodes {
                let dx = points[a].0 - points[b].0;
                let dy = points[a].1 - points[b].1;
                if dx * dx + dy * dy <= r2 {
                    edges.push((a, b));
                }
            }
        }
        match build_topology(n_nodes, &edges) {
            Ok(t) => return Ok(t),
            Err(TopologyError::DisconnectedGraph { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(TopologyError::ConnectivityFailure(GEOMETRIC_RETRY_BUDGET))
}

/// Nonzero off-diagonal weights of one column, i.e. what node `k` needs from
/// its neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationColumn {
    pub node: usize,
    pub self_weight: f64,
    /// `(l, a_lk)` for `l != k` with `a_lk != 0`, ascending in `l`.
    pub neighbors: Vec<(usize, f64)>,
}

/// Combination matrix with entry `(l, k)` holding the weight node `k`
/// applies to node `l`'s estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationMatrix {
    weights: DMatrix<f64>,
    columns: Vec<CombinationColumn>,
}

impl CombinationMatrix {
    /// Wraps a square matrix without validating it; use
    /// [`validate_combination`] to check the invariants.
    pub fn from_matrix(weights: DMatrix<f64>) -> Result<Self, TopologyError> {
        if weights.nrows() != weights.ncols() || weights.nrows() == 0 {
            return Err(TopologyError::DimensionMismatch {
                rows: weights.nrows(),
                cols: weights.ncols(),
                n: weights.nrows().max(1),
            });
        }
        let n = weights.nrows();
        let columns = (0..n)
            .map(|k| CombinationColumn {
                node: k,
                self_weight: weights[(k, k)],
                neighbors: (0..n)
                    .filter(|&l| l != k && weights[(l, k)] != 0.0)
                    .map(|l| (l, weights[(l, k)]))
                    .collect(),
            })
            .collect();
        Ok(Self { weights, columns })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_matrix(DMatrix::identity(n, n)).expect("identity is square")
    }

    pub fn n_nodes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn get(&self, l: usize, k: usize) -> f64 {
        self.weights[(l, k)]
    }

    pub fn column(&self, k: usize) -> &CombinationColumn {
        &self.columns[k]
    }
}

/// Metropolis rule: `a_lk = 1 / max(|N_k|, |N_l|)` for neighbors, diagonal
/// takes the remainder.
pub fn metropolis_weights(topology: &NetworkTopology) -> CombinationMatrix {
    let n = topology.n_nodes();
    let mut a = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut off = 0.0;
        for &l in topology.neighborhood(k) {
            if l == k {
                continue;
            }
            let w = 1.0 / topology.degree(k).max(topology.degree(l)) as f64;
            a[(l, k)] = w;
            off += w;
        }
        a[(k, k)] = 1.0 - off;
    }
    CombinationMatrix::from_matrix(a).expect("square by construction")
}

/// Outcome of [`validate_combination`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CombinationReport {
    pub dimension_ok: bool,
    /// `(l, k, a_lk)` with `a_lk < 0`.
    pub negative_entries: Vec<(usize, usize, f64)>,
    /// `(k, column sum)` with `|sum - 1| > STOCHASTIC_TOL`.
    pub column_sum_violations: Vec<(usize, f64)>,
    /// `(l, k, a_lk)` with `a_lk != 0` but `l` outside `N_k`.
    pub sparsity_violations: Vec<(usize, usize, f64)>,
}

impl CombinationReport {
    pub fn passed(&self) -> bool {
        self.dimension_ok
            && self.negative_entries.is_empty()
            && self.column_sum_violations.is_empty()
            && self.sparsity_violations.is_empty()
    }
}

pub fn validate_combination(a: &CombinationMatrix, topology: &NetworkTopology) -> CombinationReport {
    let n = topology.n_nodes();
    if a.n_nodes() != n {
        return CombinationReport::default();
    }
    let mut report = CombinationReport {
        dimension_ok: true,
        ..Default::default()
    };
    for k in 0..n {
        let mut sum = 0.0;
        for l in 0..n {
            let w = a.get(l, k);
            sum += w;
            if w < 0.0 {
                report.negative_entries.push((l, k, w));
            }
            if w != 0.0 && !topology.are_neighbors(l, k) {
                report.sparsity_violations.push((l, k, w));
            }
        }
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            report.column_sum_violations.push((k, sum));
        }
    }
    report
}
