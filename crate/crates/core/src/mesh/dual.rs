use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use super::{face_features, Edge, FaceFeatures, IndexedFaceSet, Vec3, VertexEdgeGraph};

/// Candidate triangles of a vertex/edge graph and their shared-edge adjacency.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DualGraph {
    /// Vertex triples with `i < j < k`, sorted.
    pub triangles: Vec<[usize; 3]>,
    pub features: Vec<FaceFeatures>,
    /// Sorted neighbor lists, one per triangle.
    pub adjacency: Vec<Vec<usize>>,
}

/// Orders a triangle's corners by vertex position so the stored winding does
/// not depend on vertex labels.
pub(crate) fn position_ordered(positions: &[Vec3], t: [usize; 3]) -> [usize; 3] {
    let mut t = t;
    t.sort_by(|&a, &b| {
        let (pa, pb) = (positions[a], positions[b]);
        (pa.x, pa.y, pa.z).partial_cmp(&(pb.x, pb.y, pb.z)).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    t
}

/// Enumerates all 3-cycles of `edges` and links those sharing an edge.
pub fn dual_from_edges(positions: &[Vec3], edges: &[Edge]) -> DualGraph {
    let n = positions.len();
    let mut adj = vec![BTreeSet::new(); n];
    for e in edges {
        if e.0 != e.1 {
            adj[e.0].insert(e.1);
            adj[e.1].insert(e.0);
        }
    }
    let mut triangles = Vec::new();
    for i in 0..n {
        for &j in adj[i].range(i + 1..) {
            for &k in adj[j].range(j + 1..) {
                if adj[i].contains(&k) {
                    triangles.push([i, j, k]);
                }
            }
        }
    }
    let mut by_edge: BTreeMap<Edge, Vec<usize>> = BTreeMap::new();
    for (t, &[a, b, c]) in triangles.iter().enumerate() {
        for e in [Edge(a, b), Edge(b, c), Edge(a, c)] {
            by_edge.entry(e).or_default().push(t);
        }
    }
    let mut nb = vec![BTreeSet::new(); triangles.len()];
    for list in by_edge.values() {
        for (x, &s) in list.iter().enumerate() {
            for &t in &list[x + 1..] {
                nb[s].insert(t);
                nb[t].insert(s);
            }
        }
    }
    let features = triangles
        .iter()
        .map(|&t| {
            let [a, b, c] = position_ordered(positions, t);
            face_features([positions[a], positions[b], positions[c]])
        })
        .collect();
    DualGraph { triangles, features, adjacency: nb.into_iter().map(|s| s.into_iter().collect()).collect() }
}

/// Number of candidate triangles and of directed dual edges the dual graph
/// of `g` would have, computed without building it.
pub fn dual_size(g: &VertexEdgeGraph) -> (usize, usize) {
    let adj = g.adjacency();
    let mut corners = 0;
    let mut directed = 0;
    for e in &g.edge_set {
        let t = adj[e.0].intersection(&adj[e.1]).count();
        corners += t;
        directed += t * t.saturating_sub(1);
    }
    (corners / 3, directed)
}

/// Dual graph of the thresholded edge set.
pub fn build_dual_graph(g: &VertexEdgeGraph) -> DualGraph {
    dual_from_edges(&g.positions, &g.edge_set)
}

impl DualGraph {
    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Unordered dual edges `(s, t)` with `s < t`.
    pub fn dual_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (s, nb) in self.adjacency.iter().enumerate() {
            out.extend(nb.iter().filter(|&&t| t > s).map(|&t| (s, t)));
        }
        out
    }

    /// Label per triangle: whether its vertex set is a face of `mesh`.
    /// `map` translates mesh vertex indices to graph vertex indices.
    pub fn face_labels(&self, mesh: &IndexedFaceSet, map: impl Fn(usize) -> Option<usize>) -> Vec<bool> {
        let mut faces = HashSet::new();
        for f in &mesh.faces {
            if let (Some(a), Some(b), Some(c)) = (map(f[0]), map(f[1]), map(f[2])) {
                let mut t = [a, b, c];
                t.sort_unstable();
                faces.insert(t);
            }
        }
        self.triangles.iter().map(|t| faces.contains(t)).collect()
    }

    /// Mesh made of the triangles for which `keep` is true, wound by vertex
    /// position.
    pub fn to_mesh(&self, positions: &[Vec3], keep: &[bool]) -> IndexedFaceSet {
        let faces = self
            .triangles
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(&t, _)| position_ordered(positions, t))
            .collect();
        IndexedFaceSet { vertices: positions.to_vec(), faces }
    }

    /// Debug dump: `t: i j k | neighbors`.
    pub fn adjacency_text(&self) -> String {
        let mut s = String::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            let _ = write!(s, "{}: {} {} {} |", t, tri[0], tri[1], tri[2]);
            for u in &self.adjacency[t] {
                let _ = write!(s, " {}", u);
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;

    #[test]
    fn tetrahedron_dual() {
        let d = build_dual_graph(&VertexEdgeGraph::from_mesh(&shapes::tetrahedron()));
        assert_eq!(d.len(), 4);
        assert_eq!(d.dual_edges().len(), 6);
    }

    #[test]
    fn path_has_no_triangles() {
        let pos = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        let d = dual_from_edges(&pos, &[Edge(0, 1), Edge(1, 2)]);
        assert!(d.is_empty());
    }

    #[test]
    fn labels_and_mesh_round_trip() {
        let m = shapes::tetrahedron();
        let d = build_dual_graph(&VertexEdgeGraph::from_mesh(&m));
        let labels = d.face_labels(&m, Some);
        assert!(labels.iter().all(|&l| l));
        let back = d.to_mesh(&m.vertices, &labels);
        assert_eq!(back.face_count(), 4);
        assert!((back.surface_area() - m.surface_area()).abs() < 1e-12);
    }

    #[test]
    fn dual_size_counts_without_building() {
        let n = 9;
        let pos: Vec<Vec3> = (0..n).map(|i| Vec3::new(i as f64, (i * i % 5) as f64, 0.0)).collect();
        let edges: Vec<Edge> =
            (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|(i, j)| (i * 7 + j * 3) % 4 != 0).map(|(i, j)| Edge(i, j)).collect();
        let g = VertexEdgeGraph::from_edges(pos, &edges);
        let d = build_dual_graph(&g);
        let directed: usize = d.adjacency.iter().map(Vec::len).sum();
        assert_eq!(dual_size(&g), (d.len(), directed));
        assert!(d.len() > 10);
    }
}
