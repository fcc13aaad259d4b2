//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod gradchecks;

use facetnet::autodiff::{Tape, Tensor, Var};
use facetnet::mesh::{IndexedFaceSet, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

/// Distance from `p` to triangle `abc`, by minimizing over the interior
/// projection and the three edge segments.
pub fn point_triangle_distance(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let seg = |s: Vec3, e: Vec3| {
        let d = e - s;
        let t = ((p - s).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
        (s + d * t - p).norm()
    };
    let mut best = seg(a, b).min(seg(b, c)).min(seg(c, a));
    let n = (b - a).cross(&(c - a));
    if n.norm() > 0.0 {
        let n = n.normalize();
        let q = p - n * (p - a).dot(&n);
        let inside = [(a, b), (b, c), (c, a)].iter().all(|&(s, e)| (e - s).cross(&(q - s)).dot(&n) >= 0.0);
        if inside {
            best = best.min((p - q).norm());
        }
    }
    best
}

pub fn point_mesh_distance(p: Vec3, m: &IndexedFaceSet) -> f64 {
    (0..m.face_count())
        .map(|f| {
            let [a, b, c] = m.triangle(f);
            point_triangle_distance(p, a, b, c)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Compares the tape gradient of every leaf in `leaves` against central
/// differences of `build`, which must rebuild the loss from fresh leaf values.
/// Returns the worst relative error `|g − fd| / max(|g|, |fd|, floor)`.
pub fn gradcheck<F>(values: &[Tensor], build: F, step: f64, floor: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let loss = build(&mut tape, &leaves);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|&l| tape.grad(l).unwrap().to_vec()).collect();
    let eval = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let ls: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone(), true)).collect();
        let out = build(&mut t, &ls);
        t.item(out)
    };
    let mut worst: f64 = 0.0;
    for (li, v) in values.iter().enumerate() {
        for k in 0..v.numel() {
            let mut plus = values.to_vec();
            plus[li].data_mut()[k] += step;
            let mut minus = values.to_vec();
            minus[li].data_mut()[k] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let g = analytic[li][k];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

/// A 32³ volume with random distances and known flags over the unit-cube
/// grid frame.
pub fn random_volume(r: &mut impl Rng) -> facetnet::virtual_scan::TsdfVolume {
    use facetnet::virtual_scan::{GridTransform, TsdfVolume};
    let t = GridTransform::fit(Vec3::repeat(-0.5), Vec3::repeat(0.5), 32, 3.0).unwrap();
    let mut v = TsdfVolume::unobserved(32, 3.0, t);
    let n = v.voxels();
    for i in 0..n {
        v.data[i] = r.random_range(0.0..3.0f64) as f32 as f64;
        v.data[n + i] = if r.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
    }
    v.observed = true;
    v
}

/// Checks that relabeling the vertices permutes edge, dual-face and direct
/// triple probabilities exactly (bit for bit) for a freshly initialized
/// model with `n` vertices.
pub fn equivariance_case(seed: u64, n: usize) -> Result<(), String> {
    use facetnet::mesh::{build_dual_graph, VertexEdgeGraph};
    use facetnet::model::{Model, ModelConfig};
    use rand::seq::SliceRandom;
    use std::collections::HashMap;

    let mut r = rng(seed);
    let cfg = ModelConfig { n_vertices: n, ..Default::default() };
    let model = Model::new(cfg, seed).map_err(|e| e.to_string())?;
    let vol = random_volume(&mut r);
    let p: Vec<Vec3> = (0..n)
        .map(|_| Vec3::new(r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)))
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let q: Vec<Vec3> = perm.iter().map(|&k| p[k]).collect();

    let e = model.edge_probabilities(&vol, &p).map_err(|e| e.to_string())?;
    let eq = model.edge_probabilities(&vol, &q).map_err(|e| e.to_string())?;
    for k in 0..n {
        for l in 0..n {
            if eq[k * n + l].to_bits() != e[perm[k] * n + perm[l]].to_bits() {
                return Err(format!("edge ({}, {}) differs", k, l));
            }
        }
    }
    // Keep roughly the top third of pairs so the dual graph is non-trivial.
    let mut sorted: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| e[i * n + j]).collect();
    sorted.sort_by(f64::total_cmp);
    let thresh = sorted[sorted.len() * 2 / 3];
    let g = VertexEdgeGraph::from_probabilities(p.clone(), e, thresh);
    let gq = VertexEdgeGraph::from_probabilities(q.clone(), eq, thresh);
    let (d, dq) = (build_dual_graph(&g), build_dual_graph(&gq));
    if d.len() != dq.len() {
        return Err(format!("dual sizes {} vs {}", d.len(), dq.len()));
    }
    let to_p = |t: &[usize; 3]| {
        let mut m = [perm[t[0]], perm[t[1]], perm[t[2]]];
        m.sort_unstable();
        m
    };
    let fp = model.face_probabilities(&vol, &d).map_err(|e| e.to_string())?;
    let fq = model.face_probabilities(&vol, &dq).map_err(|e| e.to_string())?;
    let where_p: HashMap<[usize; 3], usize> = d.triangles.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    for (i, t) in dq.triangles.iter().enumerate() {
        let j = *where_p.get(&to_p(t)).ok_or("triangle missing from dual")?;
        if fq[i].to_bits() != fp[j].to_bits() {
            return Err(format!("face {:?} differs", t));
        }
    }
    let (tp, pp) = model.direct_probabilities(&vol, &p).map_err(|e| e.to_string())?;
    let (tq, pq) = model.direct_probabilities(&vol, &q).map_err(|e| e.to_string())?;
    let where_p: HashMap<[usize; 3], usize> = tp.triangles.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    for (i, t) in tq.triangles.iter().enumerate() {
        if pq[i].to_bits() != pp[where_p[&to_p(t)]].to_bits() {
            return Err(format!("triple {:?} differs", t));
        }
    }
    Ok(())
}
