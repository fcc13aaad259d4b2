//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "FNCKPT\0\0"
//! version    u32      = 1
//! n_meta     u32
//!   key      u32 length + UTF-8 bytes
//!   value    u32 length + UTF-8 bytes
//! n_params   u32
//!   name     u32 length + UTF-8 bytes
//!   trainable u8
//!   ndim     u32
//!   dims     u64 × ndim
//!   values   f64 × product(dims)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use super::AutodiffError;

pub const MAGIC: &[u8; 8] = b"FNCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

fn bad(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint(msg.into())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, AutodiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {}", e)))?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, AutodiffError> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(bad("string length out of range"));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {}", e)))?;
    String::from_utf8(b).map_err(|_| bad("invalid utf-8"))
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self { meta: BTreeMap::new(), params }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), AutodiffError> {
        let io = |e: std::io::Error| bad(e.to_string());
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes()).map_err(io)?;
        for (k, v) in &self.meta {
            write_str(w, k).map_err(io)?;
            write_str(w, v).map_err(io)?;
        }
        w.write_all(&(self.params.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, p) in self.params.iter() {
            write_str(w, name).map_err(io)?;
            w.write_all(&[p.trainable as u8]).map_err(io)?;
            w.write_all(&(p.value.shape().len() as u32).to_le_bytes()).map_err(io)?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            let mut buf = Vec::with_capacity(p.value.numel() * 8);
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, AutodiffError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("missing header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {}", version)));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            meta.insert(k, v);
        }
        let mut params = ParamStore::new();
        for _ in 0..read_u32(r)? {
            let name = read_str(r)?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag).map_err(|_| bad("truncated"))?;
            let ndim = read_u32(r)? as usize;
            if ndim > 8 {
                return Err(bad(format!("{}: {} dims", name, ndim)));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw).map_err(|_| bad(format!("{}: truncated values", name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(name, Tensor::new(shape, data)?, flag[0] != 0);
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), AutodiffError> {
        let f = std::fs::File::create(path).map_err(|e| bad(format!("{}: {}", path.display(), e)))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| bad(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, AutodiffError> {
        let f = std::fs::File::open(path).map_err(|e| bad(format!("{}: {}", path.display(), e)))?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }
}
