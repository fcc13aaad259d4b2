use nalgebra::Isometry3;

use super::camera::{Camera, Intrinsics};
use super::ScanError;
use crate::mesh::{IndexedFaceSet, Vec3};

/// Depth along the camera's optical axis (z in camera coordinates), 0 where
/// no surface was hit. Row-major, `v * width + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub intrinsics: Intrinsics,
    pub pose: Isometry3<f64>,
}

impl DepthImage {
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn camera(&self) -> Camera {
        Camera { intrinsics: self.intrinsics, pose: self.pose, width: self.width, height: self.height }
    }

    /// World-space point seen at pixel `(u, v)`, if any.
    pub fn back_project(&self, u: usize, v: usize) -> Option<Vec3> {
        let d = self.at(u, v);
        if d <= 0.0 {
            return None;
        }
        let p = self.camera().ray(u, v) * d;
        Some(self.pose.transform_point(&p.into()).coords)
    }
}

const MIN_DEPTH: f64 = 1e-9;

/// Two-sided Möller–Trumbore with origin at zero; returns the ray parameter.
fn intersect(dir: &Vec3, a: &Vec3, e1: &Vec3, e2: &Vec3) -> Option<f64> {
    let p = dir.cross(e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = -a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > MIN_DEPTH).then_some(t)
}

/// Ray-casts every pixel against every triangle whose screen bounds cover it.
/// Returns the image and the number of degenerate triangles skipped.
pub fn render_depth(mesh: &IndexedFaceSet, camera: &Camera) -> Result<(DepthImage, usize), ScanError> {
    if mesh.faces.is_empty() {
        return Err(ScanError::EmptyMesh);
    }
    let (w, h) = (camera.width, camera.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let verts: Vec<Vec3> =
        mesh.vertices.iter().map(|v| camera.pose.inverse_transform_point(&(*v).into()).coords).collect();
    let k = &camera.intrinsics;
    let mut degenerate = 0;
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| verts[i]);
        let e1 = b - a;
        let e2 = c - a;
        let cr = e1.cross(&e2);
        let scale = e1.norm_squared().max(e2.norm_squared());
        if !(cr.norm() > 1e-12 * scale) {
            degenerate += 1;
            continue;
        }
        if a.z <= 0.0 && b.z <= 0.0 && c.z <= 0.0 {
            continue;
        }
        let (u0, u1, v0, v1) = if a.z > 0.0 && b.z > 0.0 && c.z > 0.0 {
            let pu = [a, b, c].map(|p| k.fx * p.x / p.z + k.cx);
            let pv = [a, b, c].map(|p| k.fy * p.y / p.z + k.cy);
            let lo_u = pu.iter().cloned().fold(f64::INFINITY, f64::min).floor() - 1.0;
            let hi_u = pu.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
            let lo_v = pv.iter().cloned().fold(f64::INFINITY, f64::min).floor() - 1.0;
            let hi_v = pv.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
            if hi_u < 0.0 || hi_v < 0.0 || lo_u >= w as f64 || lo_v >= h as f64 {
                continue;
            }
            (lo_u.max(0.0) as usize, (hi_u as usize).min(w), lo_v.max(0.0) as usize, (hi_v as usize).min(h))
        } else {
            (0, w, 0, h)
        };
        for v in v0..v1 {
            for u in u0..u1 {
                let dir = camera.ray(u, v);
                if let Some(t) = intersect(&dir, &a, &e1, &e2) {
                    let slot = &mut depth[v * w + u];
                    if t < *slot {
                        *slot = t;
                    }
                }
            }
        }
    }
    for d in depth.iter_mut() {
        if !d.is_finite() {
            *d = 0.0;
        }
    }
    Ok((DepthImage { width: w, height: h, depth, intrinsics: camera.intrinsics, pose: camera.pose }, degenerate))
}
