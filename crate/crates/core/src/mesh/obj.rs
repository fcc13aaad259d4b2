use std::fmt::Write as _;
use std::path::Path;

use super::{IndexedFaceSet, MeshError, Vec3};

fn parse_err(line: usize, msg: impl Into<String>) -> MeshError {
    MeshError::Parse { line, msg: msg.into() }
}

/// Parses Wavefront OBJ text. Only `v` and `f` records are used; polygons are
/// fan-triangulated. Texture and normal references in faces are ignored.
pub fn parse_obj(text: &str) -> Result<IndexedFaceSet, MeshError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let mut c = [0.0; 3];
                for slot in c.iter_mut() {
                    let t = tok.next().ok_or_else(|| parse_err(line_no, "vertex needs 3 coordinates"))?;
                    *slot = t.parse().map_err(|_| parse_err(line_no, format!("bad coordinate {:?}", t)))?;
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for t in tok {
                    let head = t.split('/').next().unwrap_or("");
                    let i: i64 = head.parse().map_err(|_| parse_err(line_no, format!("bad index {:?}", t)))?;
                    let n = vertices.len() as i64;
                    let resolved = if i > 0 { i - 1 } else { n + i };
                    if i == 0 || resolved < 0 || resolved >= n {
                        return Err(parse_err(line_no, format!("index {} out of range for {} vertices", i, n)));
                    }
                    idx.push(resolved as usize);
                }
                if idx.len() < 3 {
                    return Err(parse_err(line_no, "face needs at least 3 indices"));
                }
                for k in 1..idx.len() - 1 {
                    let f = [idx[0], idx[k], idx[k + 1]];
                    if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                        return Err(parse_err(line_no, "face repeats a vertex"));
                    }
                    faces.push(f);
                }
            }
            _ => {}
        }
    }
    Ok(IndexedFaceSet { vertices, faces })
}

pub fn read_obj(path: &Path) -> Result<IndexedFaceSet, MeshError> {
    parse_obj(&std::fs::read_to_string(path)?)
}

/// Serializes with shortest round-trip float formatting, so reading the
/// output back reproduces the coordinates exactly.
pub fn write_obj_string(mesh: &IndexedFaceSet) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn write_obj(path: &Path, mesh: &IndexedFaceSet) -> Result<(), MeshError> {
    std::fs::write(path, write_obj_string(mesh))?;
    Ok(())
}
