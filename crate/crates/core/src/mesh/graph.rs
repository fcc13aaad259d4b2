use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::{IndexedFaceSet, Vec3};

/// Edges are kept when their probability exceeds this value.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.5;

/// Undirected edge stored with the smaller index first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge(pub usize, pub usize);

impl Edge {
    pub fn new(a: usize, b: usize) -> Self {
        if a <= b {
            Edge(a, b)
        } else {
            Edge(b, a)
        }
    }
}

/// Predicted vertices with a dense symmetric edge-probability matrix and the
/// thresholded edge set derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexEdgeGraph {
    pub positions: Vec<Vec3>,
    /// Row-major `n×n`, symmetric, zero diagonal.
    pub edge_prob: Vec<f64>,
    /// Sorted edges with probability above the threshold.
    pub edge_set: Vec<Edge>,
}

impl VertexEdgeGraph {
    /// Builds a graph from a probability matrix. The matrix is symmetrized by
    /// averaging and its diagonal cleared before thresholding.
    pub fn from_probabilities(positions: Vec<Vec3>, mut edge_prob: Vec<f64>, threshold: f64) -> Self {
        let n = positions.len();
        assert_eq!(edge_prob.len(), n * n, "edge probability matrix must be n×n");
        for i in 0..n {
            edge_prob[i * n + i] = 0.0;
            for j in i + 1..n {
                let p = 0.5 * (edge_prob[i * n + j] + edge_prob[j * n + i]);
                edge_prob[i * n + j] = p;
                edge_prob[j * n + i] = p;
            }
        }
        let mut edge_set = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if edge_prob[i * n + j] > threshold {
                    edge_set.push(Edge(i, j));
                }
            }
        }
        Self { positions, edge_prob, edge_set }
    }

    /// Graph whose probabilities are 1 on `edges` and 0 elsewhere.
    pub fn from_edges(positions: Vec<Vec3>, edges: &[Edge]) -> Self {
        let n = positions.len();
        let mut prob = vec![0.0; n * n];
        for e in edges {
            if e.0 != e.1 && e.0 < n && e.1 < n {
                prob[e.0 * n + e.1] = 1.0;
                prob[e.1 * n + e.0] = 1.0;
            }
        }
        Self::from_probabilities(positions, prob, DEFAULT_EDGE_THRESHOLD)
    }

    pub fn from_mesh(mesh: &IndexedFaceSet) -> Self {
        Self::from_edges(mesh.vertices.clone(), &mesh.edges())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.edge_prob[i * self.len() + j]
    }

    /// Neighbor sets from the thresholded edges.
    pub fn adjacency(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.len()];
        for e in &self.edge_set {
            adj[e.0].insert(e.1);
            adj[e.1].insert(e.0);
        }
        adj
    }

    /// Debug dump: one line per vertex, `i: x y z | j k l ...`.
    pub fn adjacency_text(&self) -> String {
        let mut s = String::new();
        for (i, nb) in self.adjacency().iter().enumerate() {
            let p = self.positions[i];
            let _ = write!(s, "{}: {} {} {} |", i, p.x, p.y, p.z);
            for j in nb {
                let _ = write!(s, " {}", j);
            }
            s.push('\n');
        }
        s
    }
}
