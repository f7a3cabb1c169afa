//! Communication graph, Laplacian and Kronecker-lift helpers.
//!
//! Agents are indexed `0..n`. The graph is fixed, undirected, unweighted and
//! connected; [`Topology::new`] refuses anything else.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("topology needs at least one agent")]
    Empty,
    #[error("adjacency must be {n}x{n}, row {row} has {len} entries")]
    Shape { n: usize, row: usize, len: usize },
    #[error("adjacency entry ({i},{j}) is {value}; only 0/1 allowed")]
    NotBinary { i: usize, j: usize, value: u8 },
    #[error("adjacency is not symmetric at ({i},{j})")]
    Asymmetric { i: usize, j: usize },
    #[error("self-loop on agent {0}")]
    SelfLoop(usize),
    #[error("graph is disconnected; components: {components:?}")]
    Disconnected { components: Vec<Vec<usize>> },
    #[error("leader set is empty")]
    NoLeaders,
    #[error("leader index {index} out of range for {n} agents")]
    LeaderOutOfRange { index: usize, n: usize },
}

/// Fixed undirected communication graph with its leader set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologySpec", into = "TopologySpec")]
pub struct Topology {
    n: usize,
    adjacency: Vec<Vec<u8>>,
    neighbors: Vec<Vec<usize>>,
    leaders: Vec<usize>,
    delta: Vec<f64>,
}

/// Serialized form of a [`Topology`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub adjacency: Vec<Vec<u8>>,
    pub leaders: Vec<usize>,
}

impl TryFrom<TopologySpec> for Topology {
    type Error = GraphError;
    fn try_from(spec: TopologySpec) -> Result<Self, GraphError> {
        Topology::new(spec.adjacency, spec.leaders)
    }
}

impl From<Topology> for TopologySpec {
    fn from(t: Topology) -> Self {
        TopologySpec {
            adjacency: t.adjacency,
            leaders: t.leaders,
        }
    }
}

impl Topology {
    pub fn new(adjacency: Vec<Vec<u8>>, leaders: Vec<usize>) -> Result<Self, GraphError> {
        let n = adjacency.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        validate_adjacency(&adjacency)?;
        let components = connected_components(&adjacency);
        if components.len() > 1 {
            return Err(GraphError::Disconnected { components });
        }
        if leaders.is_empty() {
            return Err(GraphError::NoLeaders);
        }
        let mut leaders = leaders;
        leaders.sort_unstable();
        leaders.dedup();
        if let Some(&index) = leaders.iter().find(|&&l| l >= n) {
            return Err(GraphError::LeaderOutOfRange { index, n });
        }
        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| adjacency[i][j] == 1).collect())
            .collect();
        let mut delta = vec![0.0; n];
        for &l in &leaders {
            delta[l] = 1.0;
        }
        Ok(Topology {
            n,
            adjacency,
            neighbors,
            leaders,
            delta,
        })
    }

    /// Undirected ring `0 - 1 - ... - (n-1) - 0`.
    pub fn ring(n: usize, leaders: Vec<usize>) -> Result<Self, GraphError> {
        let mut adj = vec![vec![0u8; n]; n];
        if n >= 2 {
            for i in 0..n {
                let j = (i + 1) % n;
                if i != j {
                    adj[i][j] = 1;
                    adj[j][i] = 1;
                }
            }
        }
        Topology::new(adj, leaders)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn adjacency(&self) -> &[Vec<u8>] {
        &self.adjacency
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn leaders(&self) -> &[usize] {
        &self.leaders
    }

    pub fn is_leader(&self, i: usize) -> bool {
        self.delta[i] == 1.0
    }

    /// δ_i indicator, 1.0 for leaders.
    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| {
            self.neighbors[i]
                .iter()
                .copied()
                .filter(move |&j| j > i)
                .map(move |j| (i, j))
        })
    }
}

fn validate_adjacency(adjacency: &[Vec<u8>]) -> Result<(), GraphError> {
    let n = adjacency.len();
    for (row, r) in adjacency.iter().enumerate() {
        if r.len() != n {
            return Err(GraphError::Shape {
                n,
                row,
                len: r.len(),
            });
        }
    }
    for i in 0..n {
        if adjacency[i][i] != 0 {
            return Err(GraphError::SelfLoop(i));
        }
        for j in 0..n {
            let value = adjacency[i][j];
            if value > 1 {
                return Err(GraphError::NotBinary { i, j, value });
            }
            if value != adjacency[j][i] {
                return Err(GraphError::Asymmetric { i, j });
            }
        }
    }
    Ok(())
}

fn connected_components(adjacency: &[Vec<u8>]) -> Vec<Vec<usize>> {
    let n = adjacency.len();
    let mut seen = vec![false; n];
    let mut components = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            comp.push(v);
            for (w, &a) in adjacency[v].iter().enumerate() {
                if a != 0 && !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    components
}

/// True iff the (symmetric) adjacency describes a single connected component.
/// An empty graph counts as disconnected.
pub fn check_connected(adjacency: &[Vec<u8>]) -> bool {
    !adjacency.is_empty() && connected_components(adjacency).len() == 1
}

/// Dense graph Laplacian, optionally lifted as `L ⊗ I_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian {
    entries: DMatrix<f64>,
    lifted_dim: usize,
}

impl Laplacian {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn lifted_dim(&self) -> usize {
        self.lifted_dim
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self
            .entries
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }
}

/// `L = D - A` for the topology's adjacency.
pub fn build_laplacian(topology: &Topology) -> Laplacian {
    let n = topology.n();
    let mut entries = DMatrix::zeros(n, n);
    for i in 0..n {
        for &j in topology.neighbors(i) {
            entries[(i, j)] = -1.0;
        }
        entries[(i, i)] = topology.degree(i) as f64;
    }
    Laplacian {
        entries,
        lifted_dim: 1,
    }
}

/// `L ⊗ I_d`: block `(i, j)` equals `L_ij · I_d`.
pub fn kronecker_lift(laplacian: &Laplacian, d: usize) -> Laplacian {
    assert!(d >= 1, "lift dimension must be at least 1");
    let n = laplacian.entries.nrows();
    let mut entries = DMatrix::zeros(n * d, n * d);
    for i in 0..n {
        for j in 0..n {
            let v = laplacian.entries[(i, j)];
            if v != 0.0 {
                for k in 0..d {
                    entries[(i * d + k, j * d + k)] = v;
                }
            }
        }
    }
    Laplacian {
        entries,
        lifted_dim: laplacian.lifted_dim * d,
    }
}

/// `(L ⊗ I_d) x` without forming the lifted matrix; `x` is stacked per agent
/// in blocks of length `d`.
pub fn apply_lifted(topology: &Topology, x: &[f64], d: usize, out: &mut [f64]) {
    let n = topology.n();
    debug_assert_eq!(x.len(), n * d);
    debug_assert_eq!(out.len(), n * d);
    for i in 0..n {
        let deg = topology.degree(i) as f64;
        for k in 0..d {
            let mut acc = deg * x[i * d + k];
            for &j in topology.neighbors(i) {
                acc -= x[j * d + k];
            }
            out[i * d + k] = acc;
        }
    }
}
