use std::collections::HashSet;

use crate::assignment::Assignment;
use crate::mesh::{IndexedFaceSet, Vec3};

/// Distance from `p` to triangle `abc` (closest-feature walk over the
/// Voronoi regions of the triangle).
fn point_triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = va + vb + vc;
    if denom.abs() < 1e-300 {
        // Degenerate triangle: fall back to its edges.
        let seg = |s: &Vec3, e: &Vec3| {
            let d = e - s;
            let t = if d.norm_squared() > 0.0 { ((p - s).dot(&d) / d.norm_squared()).clamp(0.0, 1.0) } else { 0.0 };
            (p - (s + d * t)).norm()
        };
        return seg(a, b).min(seg(b, c)).min(seg(a, c));
    }
    let v = vb / denom;
    let w = vc / denom;
    (p - (a + ab * v + ac * w)).norm()
}

/// Exact distance from `p` to the closest face of `mesh` (to the closest
/// vertex when the mesh has no faces).
pub fn point_mesh_distance(p: &Vec3, mesh: &IndexedFaceSet) -> f64 {
    if mesh.faces.is_empty() {
        return mesh.vertices.iter().map(|v| (p - v).norm()).fold(f64::INFINITY, f64::min);
    }
    mesh.faces
        .iter()
        .map(|f| point_triangle_distance(p, &mesh.vertices[f[0]], &mesh.vertices[f[1]], &mesh.vertices[f[2]]))
        .fold(f64::INFINITY, f64::min)
}

/// A triple is positive when its matched targets form a face of `target`.
pub fn direct_gt_labels(assignment: &Assignment, target: &IndexedFaceSet, triples: &[[usize; 3]]) -> Vec<bool> {
    let faces: HashSet<[usize; 3]> = target
        .faces
        .iter()
        .map(|f| {
            let mut t = *f;
            t.sort_unstable();
            t
        })
        .collect();
    triples
        .iter()
        .map(|t| {
            let m = t.map(|v| assignment.mapping[v]);
            match m {
                [Some(a), Some(b), Some(c)] => {
                    let mut k = [a, b, c];
                    k.sort_unstable();
                    faces.contains(&k)
                }
                _ => false,
            }
        })
        .collect()
}

/// A triple is positive when its corners, edge midpoints and centroid all
/// lie within `threshold` of the target surface.
pub fn direct_surface_labels(
    positions: &[Vec3],
    target: &IndexedFaceSet,
    triples: &[[usize; 3]],
    threshold: f64,
) -> Vec<bool> {
    let near: Vec<bool> = positions.iter().map(|p| point_mesh_distance(p, target) <= threshold).collect();
    triples
        .iter()
        .map(|&[i, j, k]| {
            if !(near[i] && near[j] && near[k]) {
                return false;
            }
            let (a, b, c) = (positions[i], positions[j], positions[k]);
            [(a + b) * 0.5, (b + c) * 0.5, (a + c) * 0.5, (a + b + c) / 3.0]
                .iter()
                .all(|q| point_mesh_distance(q, target) <= threshold)
        })
        .collect()
}
