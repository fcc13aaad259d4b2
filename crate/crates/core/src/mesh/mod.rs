//! Triangle meshes, vertex/edge graphs and their dual graphs, plus the
//! geometry utilities built on them (decimation, sampling, OBJ I/O).

mod decimate;
mod dual;
mod features;
mod graph;
mod obj;
mod sample;
pub mod shapes;

pub use decimate::{decimate, DEFAULT_TARGET_VERTICES};
pub use dual::{build_dual_graph, dual_from_edges, dual_size, DualGraph};
pub(crate) use dual::position_ordered;
pub use features::{face_features, orient_by_position, FaceFeatures, DEGENERATE_RADIUS_CAP, FACE_FEATURE_DIM};
pub use graph::{Edge, VertexEdgeGraph, DEFAULT_EDGE_THRESHOLD};
pub use obj::{parse_obj, read_obj, write_obj, write_obj_string};
pub use sample::{random_barycentric, sample_surface, SurfaceSample};

use nalgebra::Vector3;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("face {face} references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange { face: usize, index: usize, count: usize },
    #[error("face {0} repeats a vertex index")]
    RepeatedIndex(usize),
    #[error("mesh has zero surface area")]
    ZeroArea,
    #[error("mesh has no vertices")]
    Empty,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("decimation target must be at least 4, got {0}")]
    BadTarget(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Vertex positions plus triangles given as index triples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IndexedFaceSet {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl IndexedFaceSet {
    /// Builds a mesh after checking the index invariants.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let mesh = Self { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        let count = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if let Some(&index) = f.iter().find(|&&i| i >= count) {
                return Err(MeshError::IndexOutOfRange { face: fi, index, count });
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::RepeatedIndex(fi));
            }
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        (b - a).cross(&(c - a)).norm() * 0.5
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Axis-aligned bounds, `None` for an empty mesh.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))))
    }

    pub fn bbox_diagonal(&self) -> f64 {
        self.bounds().map(|(lo, hi)| (hi - lo).norm()).unwrap_or(0.0)
    }

    /// Undirected edges of all faces, each as `(min, max)`, sorted and deduplicated.
    pub fn edges(&self) -> Vec<Edge> {
        let mut e: Vec<Edge> = self
            .faces
            .iter()
            .flat_map(|&[a, b, c]| [Edge::new(a, b), Edge::new(b, c), Edge::new(a, c)])
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn translated(&self, t: Vec3) -> Self {
        Self { vertices: self.vertices.iter().map(|v| v + t).collect(), faces: self.faces.clone() }
    }

    /// Appends another mesh, offsetting its indices.
    pub fn append(&mut self, other: &IndexedFaceSet) {
        let off = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.faces.extend(other.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
    }

    /// Scales and centers the mesh so its largest bounding-box extent is 1
    /// and its box center sits at the origin.
    pub fn normalized_unit(&self) -> Result<Self, MeshError> {
        let (lo, hi) = self.bounds().ok_or(MeshError::Empty)?;
        let extent = (hi - lo).max();
        if !(extent > 0.0) {
            return Err(MeshError::ZeroArea);
        }
        let center = (lo + hi) * 0.5;
        Ok(Self { vertices: self.vertices.iter().map(|v| (v - center) / extent).collect(), faces: self.faces.clone() })
    }
}
