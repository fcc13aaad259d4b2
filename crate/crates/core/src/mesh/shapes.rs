//! Procedural meshes: analytic test shapes and the builtin training corpus.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{IndexedFaceSet, Vec3};

pub fn tetrahedron() -> IndexedFaceSet {
    IndexedFaceSet {
        vertices: vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
        faces: vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
    }
}

/// Prism over a planar outline given counter-clockwise in the xy-plane. The
/// caps are fanned from the first outline point, which must see the whole
/// outline.
pub fn extrude(outline: &[(f64, f64)], z0: f64, z1: f64) -> IndexedFaceSet {
    let k = outline.len();
    let mut vertices: Vec<Vec3> = outline.iter().map(|&(x, y)| Vec3::new(x, y, z0)).collect();
    vertices.extend(outline.iter().map(|&(x, y)| Vec3::new(x, y, z1)));
    let mut faces = Vec::new();
    for i in 1..k - 1 {
        faces.push([0, i + 1, i]);
        faces.push([k, k + i, k + i + 1]);
    }
    for i in 0..k {
        let j = (i + 1) % k;
        faces.push([i, j, k + j]);
        faces.push([i, k + j, k + i]);
    }
    IndexedFaceSet { vertices, faces }
}

/// Axis-aligned box centered at the origin.
pub fn box_mesh(extent: Vec3) -> IndexedFaceSet {
    let (hx, hy) = (extent.x / 2.0, extent.y / 2.0);
    extrude(&[(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)], -extent.z / 2.0, extent.z / 2.0)
}

fn box_at(lo: Vec3, hi: Vec3) -> IndexedFaceSet {
    box_mesh(hi - lo).translated((lo + hi) * 0.5)
}

/// Extruded L profile: a `w × t` foot plus a `t × h` upright, depth `d`.
pub fn l_bracket(w: f64, h: f64, t: f64, d: f64) -> IndexedFaceSet {
    extrude(&[(0.0, 0.0), (w, 0.0), (w, t), (t, t), (t, h), (0.0, h)], 0.0, d)
}

/// Closed prism over a regular polygon (no cap center vertex).
pub fn cylinder(sides: usize, radius: f64, height: f64) -> IndexedFaceSet {
    let outline: Vec<(f64, f64)> = (0..sides)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / sides as f64;
            (radius * a.cos(), radius * a.sin())
        })
        .collect();
    extrude(&outline, 0.0, height)
}

/// Table top resting on one central column.
pub fn pedestal_table(top: Vec3, column: f64, height: f64) -> IndexedFaceSet {
    let mut m = box_at(Vec3::new(-top.x / 2.0, -top.y / 2.0, height), Vec3::new(top.x / 2.0, top.y / 2.0, height + top.z));
    m.append(&box_at(Vec3::new(-column / 2.0, -column / 2.0, 0.0), Vec3::new(column / 2.0, column / 2.0, height)));
    m
}

/// Table top on four corner legs.
pub fn four_leg_table(top: Vec3, leg: f64, height: f64) -> IndexedFaceSet {
    let (hx, hy) = (top.x / 2.0, top.y / 2.0);
    let mut m = box_at(Vec3::new(-hx, -hy, height), Vec3::new(hx, hy, height + top.z));
    for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
        let cx = sx * (hx - leg / 2.0);
        let cy = sy * (hy - leg / 2.0);
        m.append(&box_at(Vec3::new(cx - leg / 2.0, cy - leg / 2.0, 0.0), Vec3::new(cx + leg / 2.0, cy + leg / 2.0, height)));
    }
    m
}

/// Unit sphere from a subdivided icosahedron; level 3 has 642 vertices.
pub fn icosphere(level: usize) -> IndexedFaceSet {
    let p = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, p, 0.0),
        (1.0, p, 0.0),
        (-1.0, -p, 0.0),
        (1.0, -p, 0.0),
        (0.0, -1.0, p),
        (0.0, 1.0, p),
        (0.0, -1.0, -p),
        (0.0, 1.0, -p),
        (p, 0.0, -1.0),
        (p, 0.0, 1.0),
        (-p, 0.0, -1.0),
        (-p, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    IndexedFaceSet { vertices, faces }
}

/// Shape categories of the builtin corpus.
pub const BUILTIN_CLASSES: [&str; 5] = ["box", "bracket", "cylinder", "pedestal", "table"];

#[derive(Debug, Clone)]
pub struct BuiltinShape {
    pub name: String,
    pub class: String,
    /// Normalized to a unit bounding cube centered at the origin.
    pub mesh: IndexedFaceSet,
}

/// Random instance of one builtin class.
pub fn builtin_shape<R: Rng + ?Sized>(class: &str, rng: &mut R) -> Option<IndexedFaceSet> {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let m = match class {
        "box" => box_mesh(Vec3::new(u(0.4, 1.0), u(0.4, 1.0), u(0.4, 1.0))),
        "bracket" => {
            let (w, h) = (u(0.6, 1.0), u(0.6, 1.0));
            let t = u(0.15, 0.35);
            l_bracket(w, h, t, u(0.3, 1.0))
        }
        "cylinder" => {
            let sides = 6 + (u(0.0, 3.0) as usize).min(2);
            cylinder(sides, u(0.25, 0.5), u(0.5, 1.0))
        }
        "pedestal" => pedestal_table(Vec3::new(u(0.7, 1.0), u(0.7, 1.0), u(0.05, 0.12)), u(0.12, 0.25), u(0.5, 0.9)),
        "table" => four_leg_table(Vec3::new(u(0.7, 1.0), u(0.5, 0.9), u(0.05, 0.12)), u(0.06, 0.12), u(0.4, 0.8)),
        _ => return None,
    };
    m.normalized_unit().ok()
}

/// `count` shapes cycling through `classes`, deterministic in `seed`.
pub fn builtin_corpus(count: usize, classes: &[&str], seed: u64) -> Vec<BuiltinShape> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let class = classes[i % classes.len()];
        if let Some(mesh) = builtin_shape(class, &mut rng) {
            out.push(BuiltinShape { name: format!("{}_{:03}", class, i), class: class.to_string(), mesh });
        }
    }
    out
}
