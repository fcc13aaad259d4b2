//! Synthetic depth rendering and volumetric fusion into a five-channel
//! truncated distance grid.
//!
//! Frames: meshes live in "world" units (the unit-cube frame of normalized
//! shapes). The voxel grid frame is reached through a [`GridTransform`];
//! voxel `i` along an axis has its center at grid coordinate `i + 0.5`.

mod camera;
mod fusion;
mod grid;
mod io;
mod render;

pub use camera::{sphere_cameras, Camera, Intrinsics, DEFAULT_IMAGE_SIZE, DEFAULT_VFOV_DEG};
pub use fusion::{
    fuse_tsdf, scan_mesh, scan_mesh_with, FusionConfig, Scan, TsdfVolume, ViewCombine, CAMERA_DISTANCE_FACTOR, CHANNELS,
    TRUNCATION_VOXELS, UNOBSERVED_DISTANCE,
};
pub use grid::{normalize_to_grid, GridTransform, GRID_PADDING, GRID_RESOLUTION};
pub use io::{read_depth, read_tsdf, write_depth, write_tsdf};
pub use render::{render_depth, DepthImage};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("mesh has zero extent")]
    ZeroExtent,
    #[error("no depth images to fuse")]
    NoViews,
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
