use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mesh::Vec3;

pub const DEFAULT_IMAGE_SIZE: usize = 128;
pub const DEFAULT_VFOV_DEG: f64 = 60.0;

/// Pinhole intrinsics in pixels. Pixel `(u, v)` covers `[u, u+1) × [v, v+1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn from_vfov(width: usize, height: usize, vfov_deg: f64) -> Self {
        let fy = 0.5 * height as f64 / (0.5 * vfov_deg.to_radians()).tan();
        Self { fx: fy, fy, cx: 0.5 * width as f64, cy: 0.5 * height as f64 }
    }
}

/// Camera looking down its local +z axis with +x right and +y down.
/// `pose` maps camera coordinates to world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Isometry3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn look_at(eye: Vec3, target: Vec3, width: usize, height: usize, vfov_deg: f64) -> Self {
        let z = (target - eye).normalize();
        let up = if z.cross(&Vec3::z()).norm() > 1e-6 { Vec3::z() } else { Vec3::y() };
        let x = (-up).cross(&z).normalize();
        let y = z.cross(&x);
        let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
        let pose = Isometry3::from_parts(Translation3::from(eye), UnitQuaternion::from_rotation_matrix(&rot));
        Self { intrinsics: Intrinsics::from_vfov(width, height, vfov_deg), pose, width, height }
    }

    /// Camera-frame direction through the center of pixel `(u, v)`, with unit z.
    pub fn ray(&self, u: usize, v: usize) -> Vec3 {
        let k = &self.intrinsics;
        Vec3::new((u as f64 + 0.5 - k.cx) / k.fx, (v as f64 + 0.5 - k.cy) / k.fy, 1.0)
    }

    /// Pixel containing the projection of a camera-frame point in front of
    /// the camera.
    pub fn project(&self, p: &Vec3) -> Option<(usize, usize)> {
        if p.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        let u = (k.fx * p.x / p.z + k.cx).floor();
        let v = (k.fy * p.y / p.z + k.cy).floor();
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    }
}

/// `count` cameras on a sphere of `radius` around `center`, all looking at it.
/// One camera gets a random direction above the horizon; more cameras are
/// spread evenly in azimuth at alternating elevations, with a random azimuth
/// offset.
pub fn sphere_cameras(center: Vec3, radius: f64, count: usize, seed: u64, size: usize, vfov_deg: f64) -> Vec<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random_range(0.0..std::f64::consts::TAU);
    (0..count)
        .map(|i| {
            let (az, el) = if count == 1 {
                (offset, rng.random_range(10f64..50.0).to_radians())
            } else {
                let el = if i % 2 == 0 { 35.0 } else { -25.0 };
                (offset + std::f64::consts::TAU * i as f64 / count as f64, f64::to_radians(el))
            };
            let dir = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            Camera::look_at(center + dir * radius, center, size, size, vfov_deg)
        })
        .collect()
}
