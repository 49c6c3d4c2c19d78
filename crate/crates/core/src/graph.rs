//! Distance-rigidity machinery for planar formations.
//!
//! Vertices are numbered from 1 as in the usual graph notation; leaders occupy
//! vertices `1..=n_leaders`. Every vector and matrix indexed by edge follows the
//! declaration order of [`DirectedGraph::edges`].

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;

/// Relative tolerance below which singular values count as zero.
pub const RANK_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectedGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    n_leaders: usize,
}

impl DirectedGraph {
    pub fn new(n: usize, edges: Vec<(usize, usize)>, n_leaders: usize) -> Result<Self> {
        if n_leaders < 2 || n_leaders > n {
            return Err(Error::InvalidGraph(format!(
                "leader count {n_leaders} outside 2..={n}"
            )));
        }
        for (k, &(i, j)) in edges.iter().enumerate() {
            if i == 0 || j == 0 || i > n || j > n {
                return Err(Error::InvalidGraph(format!(
                    "edge {k} = ({i}, {j}) references a vertex outside 1..={n}"
                )));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!("self-loop at vertex {i}")));
            }
            let dup = edges[..k]
                .iter()
                .any(|&(a, b)| (a, b) == (i, j) || (a, b) == (j, i));
            if dup {
                return Err(Error::InvalidGraph(format!("duplicate edge ({i}, {j})")));
            }
        }
        Ok(Self { n, edges, n_leaders })
    }

    /// Four agents on a unit square: leaders 1-2 in front, followers 3-4 behind.
    pub fn unit_square() -> Self {
        Self::new(4, vec![(1, 2), (1, 4), (1, 3), (2, 4), (3, 4)], 2)
            .expect("static graph is valid")
    }

    pub fn vertex_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn leader_count(&self) -> usize {
        self.n_leaders
    }

    pub fn is_leader(&self, vertex: usize) -> bool {
        (1..=self.n_leaders).contains(&vertex)
    }

    pub fn followers(&self) -> impl Iterator<Item = usize> + '_ {
        self.n_leaders + 1..=self.n
    }

    /// Undirected adjacency of `vertex`: `(neighbor, edge index)` pairs in edge order.
    pub fn neighbors(&self, vertex: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges
            .iter()
            .enumerate()
            .filter_map(move |(k, &(i, j))| {
                if i == vertex {
                    Some((j, k))
                } else if j == vertex {
                    Some((i, k))
                } else {
                    None
                }
            })
    }
}

/// A graph realized at concrete positions, with desired squared edge lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Framework {
    pub graph: DirectedGraph,
    pub positions: Vec<Vec2>,
    pub desired_sq: Vec<f64>,
}

impl Framework {
    pub fn new(graph: DirectedGraph, positions: Vec<Vec2>, desired_sq: Vec<f64>) -> Result<Self> {
        if positions.len() != graph.vertex_count() {
            return Err(Error::InvalidFramework(format!(
                "{} positions for {} vertices",
                positions.len(),
                graph.vertex_count()
            )));
        }
        if desired_sq.len() != graph.edge_count() {
            return Err(Error::InvalidFramework(format!(
                "{} desired lengths for {} edges",
                desired_sq.len(),
                graph.edge_count()
            )));
        }
        if desired_sq.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidFramework(
                "desired squared lengths must be positive".into(),
            ));
        }
        if positions.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidFramework("non-finite position".into()));
        }
        Ok(Self { graph, positions, desired_sq })
    }

    pub fn position(&self, vertex: usize) -> Vec2 {
        self.positions[vertex - 1]
    }

    /// Edge vector `z_k = p_j - p_i` for `e_k = (i, j)`.
    pub fn edge_vector(&self, k: usize) -> Vec2 {
        let (i, j) = self.graph.edges[k];
        self.position(j) - self.position(i)
    }
}

pub fn incidence_matrix(graph: &DirectedGraph) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(graph.edge_count(), graph.vertex_count());
    for (k, &(i, j)) in graph.edges().iter().enumerate() {
        h[(k, i - 1)] = -1.0;
        h[(k, j - 1)] = 1.0;
    }
    h
}

/// Squared edge lengths in edge order.
pub fn rigidity_function(fw: &Framework) -> DVector<f64> {
    DVector::from_iterator(
        fw.graph.edge_count(),
        (0..fw.graph.edge_count()).map(|k| fw.edge_vector(k).norm_squared()),
    )
}

/// Half the Jacobian of [`rigidity_function`]: row `k` holds `-z_k` in the tail
/// block and `+z_k` in the head block.
pub fn rigidity_matrix(fw: &Framework) -> DMatrix<f64> {
    let n = fw.graph.vertex_count();
    let mut r = DMatrix::zeros(fw.graph.edge_count(), 2 * n);
    for (k, &(i, j)) in fw.graph.edges().iter().enumerate() {
        let z = fw.edge_vector(k);
        r[(k, 2 * (i - 1))] = -z.x;
        r[(k, 2 * (i - 1) + 1)] = -z.y;
        r[(k, 2 * (j - 1))] = z.x;
        r[(k, 2 * (j - 1) + 1)] = z.y;
    }
    r
}

pub fn distance_errors(fw: &Framework) -> DVector<f64> {
    rigidity_function(fw) - DVector::from_column_slice(&fw.desired_sq)
}

/// `||d - d*||` over edge lengths (not squared).
pub fn formation_error(fw: &Framework) -> f64 {
    (0..fw.graph.edge_count())
        .map(|k| (fw.edge_vector(k).norm() - fw.desired_sq[k].sqrt()).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Numerical rank with singular values below `RANK_TOLERANCE * sigma_max` discarded.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOLERANCE * max).count()
}

/// Planar distance rigidity test: rank of the rigidity matrix equals `2n - 3`.
pub fn is_infinitesimally_rigid(fw: &Framework) -> bool {
    let n = fw.graph.vertex_count();
    if n < 2 {
        return false;
    }
    let first = fw.positions[0];
    if fw.positions.iter().all(|p| (p - first).norm() == 0.0) {
        return false;
    }
    numerical_rank(&rigidity_matrix(fw)) == 2 * n - 3
}
