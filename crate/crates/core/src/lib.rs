//! Mesh prediction from partial volumetric scans.

pub mod autodiff;
pub mod mesh;
pub mod virtual_scan;
pub mod assignment;
pub mod model;
pub mod losses;
pub mod metrics;
pub mod trainer;
