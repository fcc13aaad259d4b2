//! Little-endian binary formats.
//!
//! TSDF volume:
//!
//! ```text
//! magic       4 bytes "TSDF"
//! version     u32 = 1
//! resolution  u32
//! truncation  f64  (voxels)
//! scale       f64  grid = scale · world + offset
//! offset      f64 × 3
//! observed    u8
//! planes      f32 × 5 × res³: distance, known, x, y, z; index (z·res + y)·res + x
//! ```
//!
//! Depth image:
//!
//! ```text
//! magic       4 bytes "DPTH"
//! version     u32 = 1
//! width       u32
//! height      u32
//! fx fy cx cy f64 × 4
//! pose        f64 × 12  camera-to-world [R | t], row-major 3×4
//! depth       f32 × width·height, row-major, 0 = no hit
//! ```

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion};

use super::camera::Intrinsics;
use super::fusion::{TsdfVolume, CHANNELS};
use super::grid::GridTransform;
use super::render::DepthImage;
use super::ScanError;
use crate::mesh::Vec3;

const TSDF_MAGIC: &[u8; 4] = b"TSDF";
const DEPTH_MAGIC: &[u8; 4] = b"DPTH";
const VERSION: u32 = 1;

fn fmt(msg: impl Into<String>) -> ScanError {
    ScanError::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ScanError> {
        if self.buf.len() < n {
            return Err(fmt("file truncated"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn u32(&mut self) -> Result<u32, ScanError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ScanError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, ScanError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| fmt("size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<(), ScanError> {
        if self.take(4)? != magic {
            return Err(fmt(format!("expected {} header", String::from_utf8_lossy(magic))));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(fmt(format!("unsupported version {}", v)));
        }
        Ok(())
    }
}

pub fn write_tsdf<W: Write>(w: &mut W, vol: &TsdfVolume) -> Result<(), ScanError> {
    let mut buf = Vec::with_capacity(64 + vol.data.len() * 4);
    buf.extend_from_slice(TSDF_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(vol.resolution as u32).to_le_bytes());
    buf.extend_from_slice(&vol.truncation.to_le_bytes());
    buf.extend_from_slice(&vol.transform.scale.to_le_bytes());
    for a in 0..3 {
        buf.extend_from_slice(&vol.transform.offset[a].to_le_bytes());
    }
    buf.push(vol.observed as u8);
    for &v in &vol.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tsdf<R: Read>(r: &mut R) -> Result<TsdfVolume, ScanError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut rd = Reader { buf: &bytes };
    rd.header(TSDF_MAGIC)?;
    let resolution = rd.u32()? as usize;
    if resolution == 0 || resolution > 512 {
        return Err(fmt(format!("resolution {} out of range", resolution)));
    }
    let truncation = rd.f64()?;
    let scale = rd.f64()?;
    let offset = Vec3::new(rd.f64()?, rd.f64()?, rd.f64()?);
    let observed = rd.take(1)?[0] != 0;
    let data = rd.f32s(CHANNELS * resolution.pow(3))?;
    if !rd.buf.is_empty() {
        return Err(fmt("trailing bytes after volume"));
    }
    Ok(TsdfVolume { resolution, truncation, transform: GridTransform { scale, offset }, data, observed })
}

pub fn write_depth<W: Write>(w: &mut W, img: &DepthImage) -> Result<(), ScanError> {
    let mut buf = Vec::with_capacity(160 + img.depth.len() * 4);
    buf.extend_from_slice(DEPTH_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(img.width as u32).to_le_bytes());
    buf.extend_from_slice(&(img.height as u32).to_le_bytes());
    let k = &img.intrinsics;
    for v in [k.fx, k.fy, k.cx, k.cy] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let r = img.pose.rotation.to_rotation_matrix();
    let t = img.pose.translation.vector;
    for i in 0..3 {
        for j in 0..3 {
            buf.extend_from_slice(&r[(i, j)].to_le_bytes());
        }
        buf.extend_from_slice(&t[i].to_le_bytes());
    }
    for &d in &img.depth {
        buf.extend_from_slice(&(d as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_depth<R: Read>(r: &mut R) -> Result<DepthImage, ScanError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut rd = Reader { buf: &bytes };
    rd.header(DEPTH_MAGIC)?;
    let width = rd.u32()? as usize;
    let height = rd.u32()? as usize;
    let intrinsics = Intrinsics { fx: rd.f64()?, fy: rd.f64()?, cx: rd.f64()?, cy: rd.f64()? };
    let mut m = Matrix3::zeros();
    let mut t = Vec3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] = rd.f64()?;
        }
        t[i] = rd.f64()?;
    }
    if (m.transpose() * m - Matrix3::identity()).norm() > 1e-6 || (m.determinant() - 1.0).abs() > 1e-6 {
        return Err(fmt("pose rotation is not orthonormal"));
    }
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
    let depth = rd.f32s(width * height)?;
    if depth.iter().any(|d| !(*d >= 0.0)) {
        return Err(fmt("negative or NaN depth"));
    }
    Ok(DepthImage { width, height, depth, intrinsics, pose: Isometry3::from_parts(Translation3::from(t), rot) })
}

impl TsdfVolume {
    pub fn save(&self, path: &Path) -> Result<(), ScanError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_tsdf(&mut f, self)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScanError> {
        read_tsdf(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
