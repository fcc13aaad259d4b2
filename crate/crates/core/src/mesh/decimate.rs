use std::collections::{HashMap, HashSet};

use nalgebra::Matrix3;

use super::{IndexedFaceSet, MeshError, Vec3};

pub const DEFAULT_TARGET_VERTICES: usize = 100;

/// Largest clustering resolution tried, in cells along the longest axis.
const MAX_RESOLUTION: usize = 96;

/// Simplifies by vertex clustering. Every grid resolution up to
/// `MAX_RESOLUTION` is tried and the result with the most vertices not
/// exceeding `target` is kept. Each cluster is placed at the minimizer of its
/// face-plane quadric, regularized toward the cluster mean and clamped near its
/// cell.
pub fn decimate(mesh: &IndexedFaceSet, target: usize) -> Result<IndexedFaceSet, MeshError> {
    if target < 4 {
        return Err(MeshError::BadTarget(target));
    }
    mesh.validate()?;
    if mesh.vertex_count() <= target {
        return Ok(mesh.clone());
    }
    let (lo, hi) = mesh.bounds().ok_or(MeshError::Empty)?;
    let extent = (hi - lo).max();
    if !(extent > 0.0) {
        return Err(MeshError::ZeroArea);
    }
    let mut best: Option<(usize, Clustering)> = None;
    for res in 1..=MAX_RESOLUTION {
        let c = cluster(mesh, lo, extent / res as f64);
        let count = c.used.len();
        if count <= target && best.as_ref().is_none_or(|(b, _)| count > *b) {
            best = Some((count, c));
        }
    }
    let (_, c) = best.ok_or(MeshError::BadTarget(target))?;
    Ok(c.into_mesh(mesh))
}

struct Clustering {
    /// Cluster id per input vertex.
    label: Vec<usize>,
    /// Cluster ids that survive, in output order.
    used: Vec<usize>,
    faces: Vec<[usize; 3]>,
    cell: f64,
    origin: Vec3,
    keys: Vec<[i64; 3]>,
}

fn cluster(mesh: &IndexedFaceSet, origin: Vec3, cell: f64) -> Clustering {
    let mut ids: HashMap<[i64; 3], usize> = HashMap::new();
    let mut keys = Vec::new();
    let label: Vec<usize> = mesh
        .vertices
        .iter()
        .map(|v| {
            let k = [0, 1, 2].map(|a| ((v[a] - origin[a]) / cell).floor() as i64);
            *ids.entry(k).or_insert_with(|| {
                keys.push(k);
                keys.len() - 1
            })
        })
        .collect();
    let mut seen = HashSet::new();
    let mut faces = Vec::new();
    for f in &mesh.faces {
        let t = f.map(|i| label[i]);
        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
            continue;
        }
        let mut key = t;
        key.sort_unstable();
        if seen.insert(key) {
            faces.push(t);
        }
    }
    let mut used = Vec::new();
    let mut mark = vec![false; keys.len()];
    for f in &faces {
        for &c in f {
            if !mark[c] {
                mark[c] = true;
                used.push(c);
            }
        }
    }
    Clustering { label, used, faces, cell, origin, keys }
}

impl Clustering {
    fn into_mesh(self, mesh: &IndexedFaceSet) -> IndexedFaceSet {
        let k = self.keys.len();
        let mut quad = vec![Matrix3::<f64>::zeros(); k];
        let mut lin = vec![Vec3::zeros(); k];
        let mut sum = vec![Vec3::zeros(); k];
        let mut cnt = vec![0usize; k];
        for (i, v) in mesh.vertices.iter().enumerate() {
            sum[self.label[i]] += v;
            cnt[self.label[i]] += 1;
        }
        for f in 0..mesh.face_count() {
            let [a, b, c] = mesh.triangle(f);
            let cr = (b - a).cross(&(c - a));
            let area = 0.5 * cr.norm();
            if area <= 0.0 {
                continue;
            }
            let n = cr.normalize();
            let d = -n.dot(&a);
            let q = n * n.transpose() * area;
            for &vi in &mesh.faces[f] {
                let l = self.label[vi];
                quad[l] += q;
                lin[l] += n * (d * area);
            }
        }
        let mut remap = vec![usize::MAX; k];
        let mut vertices = Vec::with_capacity(self.used.len());
        for &c in &self.used {
            let mean = sum[c] / cnt[c] as f64;
            let lambda = 1e-3 * quad[c].trace() / 3.0 + 1e-12;
            let a = quad[c] + Matrix3::identity() * lambda;
            let rhs = -lin[c] + mean * lambda;
            let mut p = a.lu().solve(&rhs).unwrap_or(mean);
            if !p.iter().all(|x| x.is_finite()) {
                p = mean;
            }
            let key = self.keys[c];
            for ax in 0..3 {
                let lo = self.origin[ax] + (key[ax] as f64 - 0.5) * self.cell;
                let hi = self.origin[ax] + (key[ax] as f64 + 1.5) * self.cell;
                p[ax] = p[ax].clamp(lo, hi);
            }
            remap[c] = vertices.len();
            vertices.push(p);
        }
        let faces = self.faces.iter().map(|f| f.map(|c| remap[c])).collect();
        IndexedFaceSet { vertices, faces }
    }
}
