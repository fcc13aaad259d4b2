use super::ScanError;
use crate::mesh::{IndexedFaceSet, Vec3};

pub const GRID_RESOLUTION: usize = 32;
/// Empty voxels left on each side of the longest axis.
pub const GRID_PADDING: f64 = 3.0;

/// Similarity transform `grid = scale · world + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridTransform {
    pub scale: f64,
    pub offset: Vec3,
}

impl GridTransform {
    /// Fits `lo..hi` into a grid of `resolution` with `padding` voxels on each
    /// side of the longest axis, centered.
    pub fn fit(lo: Vec3, hi: Vec3, resolution: usize, padding: f64) -> Result<Self, ScanError> {
        let extent = (hi - lo).max();
        if !(extent > 0.0) || !extent.is_finite() {
            return Err(ScanError::ZeroExtent);
        }
        let scale = (resolution as f64 - 2.0 * padding) / extent;
        let center = (lo + hi) * 0.5;
        Ok(Self { scale, offset: Vec3::repeat(resolution as f64 / 2.0) - center * scale })
    }

    pub fn to_grid(&self, p: &Vec3) -> Vec3 {
        p * self.scale + self.offset
    }

    pub fn to_world(&self, g: &Vec3) -> Vec3 {
        (g - self.offset) / self.scale
    }

    /// World position of the center of voxel `(x, y, z)`.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.to_world(&Vec3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5))
    }

    /// One voxel edge in world units.
    pub fn voxel_size(&self) -> f64 {
        1.0 / self.scale
    }
}

/// Maps the mesh into the standard 32³ grid frame (longest extent 26 voxels,
/// centered) and returns the transform that does so.
pub fn normalize_to_grid(mesh: &IndexedFaceSet) -> Result<(IndexedFaceSet, GridTransform), ScanError> {
    let (lo, hi) = mesh.bounds().ok_or(ScanError::EmptyMesh)?;
    let t = GridTransform::fit(lo, hi, GRID_RESOLUTION, GRID_PADDING)?;
    let vertices = mesh.vertices.iter().map(|v| t.to_grid(v)).collect();
    Ok((IndexedFaceSet { vertices, faces: mesh.faces.clone() }, t))
}
