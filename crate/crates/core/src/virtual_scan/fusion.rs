use super::camera::{sphere_cameras, DEFAULT_IMAGE_SIZE, DEFAULT_VFOV_DEG};
use super::grid::{GridTransform, GRID_PADDING, GRID_RESOLUTION};
use super::render::{render_depth, DepthImage};
use super::ScanError;
use crate::mesh::{IndexedFaceSet, Vec3};

/// distance, known mask, x, y, z.
pub const CHANNELS: usize = 5;
pub const TRUNCATION_VOXELS: f64 = 3.0;
/// Distance written into voxels no view observed.
pub const UNOBSERVED_DISTANCE: f64 = TRUNCATION_VOXELS;
/// Cameras sit at this multiple of the bounding-box diagonal from its center.
pub const CAMERA_DISTANCE_FACTOR: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub resolution: usize,
    /// In voxels.
    pub truncation: f64,
    /// Upper bound on the pixel search radius around a voxel's projection.
    pub max_window: usize,
    pub combine: ViewCombine,
}

/// How per-view distances of one voxel are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ViewCombine {
    /// Smallest per-view distance. Each view only bounds the true distance
    /// from above, so the minimum is the tightest estimate.
    #[default]
    Min,
    /// Plain average over observing views.
    Mean,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { resolution: GRID_RESOLUTION, truncation: TRUNCATION_VOXELS, max_window: 12, combine: ViewCombine::Min }
    }
}

/// Five channel planes, each indexed `(z * res + y) * res + x`, stored
/// channel-major so the buffer is directly a `[5, res, res, res]` tensor.
/// Values are rounded to `f32` precision so the binary format is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub resolution: usize,
    pub truncation: f64,
    pub transform: GridTransform,
    pub data: Vec<f64>,
    /// False when no view observed any voxel.
    pub observed: bool,
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

impl TsdfVolume {
    pub fn voxels(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution + y) * self.resolution + x
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn distance(&self, x: usize, y: usize, z: usize) -> f64 {
        self.channel(0)[self.index(x, y, z)]
    }

    pub fn known(&self, x: usize, y: usize, z: usize) -> bool {
        self.channel(1)[self.index(x, y, z)] > 0.5
    }

    pub fn coord(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let i = self.index(x, y, z);
        Vec3::new(self.channel(2)[i], self.channel(3)[i], self.channel(4)[i])
    }

    /// Volume where nothing was observed.
    pub fn unobserved(resolution: usize, truncation: f64, transform: GridTransform) -> Self {
        let n = resolution.pow(3);
        let mut data = vec![0.0; CHANNELS * n];
        data[..n].fill(f32_round(truncation.min(UNOBSERVED_DISTANCE)));
        let mut v = Self { resolution, truncation, transform, data, observed: false };
        v.fill_coords();
        v
    }

    fn fill_coords(&mut self) {
        let (r, n) = (self.resolution, self.voxels());
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    let i = self.index(x, y, z);
                    let p = self.transform.voxel_center(x, y, z);
                    for a in 0..3 {
                        self.data[(2 + a) * n + i] = f32_round(p[a]);
                    }
                }
            }
        }
    }
}

/// Fuses depth images into an unsigned truncated distance grid.
///
/// A voxel is observed by a view when it projects into the image and is not
/// more than the truncation band behind the depth seen at its pixel; pixels
/// without a hit count as free space. The per-view distance is the distance
/// to the nearest back-projected depth point in a window around the
/// projection, clamped to the truncation; observing views are merged by
/// `cfg.combine`.
pub fn fuse_tsdf(depths: &[DepthImage], transform: GridTransform, cfg: &FusionConfig) -> Result<TsdfVolume, ScanError> {
    if depths.is_empty() {
        return Err(ScanError::NoViews);
    }
    let res = cfg.resolution;
    let n = res.pow(3);
    let trunc_world = cfg.truncation * transform.voxel_size();
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    for img in depths {
        let cam = img.camera();
        let points: Vec<Option<Vec3>> =
            (0..img.height).flat_map(|v| (0..img.width).map(move |u| (u, v))).map(|(u, v)| img.back_project(u, v)).collect();
        for z in 0..res {
            for y in 0..res {
                for x in 0..res {
                    let p = transform.voxel_center(x, y, z);
                    let pc = cam.pose.inverse_transform_point(&p.into()).coords;
                    let Some((u, v)) = cam.project(&pc) else { continue };
                    let d = img.at(u, v);
                    if d > 0.0 && pc.z > d + trunc_world {
                        continue;
                    }
                    let r = ((trunc_world * img.intrinsics.fx.max(img.intrinsics.fy) / pc.z).ceil() as usize + 1)
                        .min(cfg.max_window);
                    let mut best = trunc_world * trunc_world;
                    for vv in v.saturating_sub(r)..(v + r + 1).min(img.height) {
                        for uu in u.saturating_sub(r)..(u + r + 1).min(img.width) {
                            if let Some(q) = points[vv * img.width + uu] {
                                best = best.min((q - p).norm_squared());
                            }
                        }
                    }
                    let i = (z * res + y) * res + x;
                    let d = (best.sqrt() * transform.scale).min(cfg.truncation);
                    sum[i] = match cfg.combine {
                        ViewCombine::Min if count[i] > 0 => sum[i].min(d),
                        ViewCombine::Min => d,
                        ViewCombine::Mean => sum[i] + d,
                    };
                    count[i] += 1;
                }
            }
        }
    }
    let mut vol = TsdfVolume::unobserved(res, cfg.truncation, transform);
    vol.observed = count.iter().any(|&c| c > 0);
    for i in 0..n {
        if count[i] > 0 {
            vol.data[i] = f32_round(match cfg.combine {
                ViewCombine::Min => sum[i],
                ViewCombine::Mean => sum[i] / count[i] as f64,
            }.clamp(0.0, cfg.truncation));
            vol.data[n + i] = 1.0;
        }
    }
    Ok(vol)
}

/// Output of [`scan_mesh`].
#[derive(Debug, Clone)]
pub struct Scan {
    pub volume: TsdfVolume,
    pub depths: Vec<DepthImage>,
    pub degenerate_faces: usize,
}

/// Renders `views` synthesized cameras around a world-frame mesh and fuses
/// them into the standard grid fitted to the mesh bounds.
pub fn scan_mesh(mesh: &IndexedFaceSet, views: usize, seed: u64) -> Result<Scan, ScanError> {
    scan_mesh_with(mesh, views, seed, DEFAULT_IMAGE_SIZE, &FusionConfig::default())
}

pub fn scan_mesh_with(
    mesh: &IndexedFaceSet,
    views: usize,
    seed: u64,
    image_size: usize,
    cfg: &FusionConfig,
) -> Result<Scan, ScanError> {
    let (lo, hi) = mesh.bounds().ok_or(ScanError::EmptyMesh)?;
    let transform = GridTransform::fit(lo, hi, cfg.resolution, GRID_PADDING)?;
    let center = (lo + hi) * 0.5;
    let radius = CAMERA_DISTANCE_FACTOR * (hi - lo).norm();
    let mut depths = Vec::with_capacity(views);
    let mut degenerate_faces = 0;
    for cam in sphere_cameras(center, radius, views, seed, image_size, DEFAULT_VFOV_DEG) {
        let (img, deg) = render_depth(mesh, &cam)?;
        degenerate_faces = degenerate_faces.max(deg);
        depths.push(img);
    }
    let volume = fuse_tsdf(&depths, transform, cfg)?;
    Ok(Scan { volume, depths, degenerate_faces })
}
