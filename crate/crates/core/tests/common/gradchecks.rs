//! Central-difference checks of every tape primitive and every training
//! loss, shared by the autodiff tests and the acceptance suite.

use std::sync::Arc;

use facetnet::autodiff::{Segments, Tape, Tensor, Var};
use facetnet::losses::{
    chamfer_mesh_loss, edge_ce_loss, face_ce_loss, matched_vertex_loss, ClassWeighting, Matcher,
};
use facetnet::mesh::Vec3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, random_tensor, rng};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSED_TOL: f64 = 1e-3;
const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-3;

/// `Σ out ⊙ W` for a fixed random `W`, turning any output into a scalar.
fn project(t: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = t.shape(out).to_vec();
    let w = random_tensor(&mut rng(seed), &shape, 1.0);
    let w = t.constant(w);
    let p = t.mul(out, w).unwrap();
    t.sum(p)
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.random_range(1..6), r.random_range(1..5))
}

/// Tensor whose entries stay at least `gap` away from zero, so kinks at 0
/// are outside the difference stencil.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = random_tensor(r, shape, 1.0);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap };
        }
    }
    t
}

fn random_groups(r: &mut ChaCha8Rng, rows: usize, groups: usize) -> Arc<Segments> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); groups];
    for row in 0..rows {
        let take = r.random_range(0..3);
        for _ in 0..take {
            members[r.random_range(0..groups)].push(row);
        }
    }
    Arc::new(Segments::from_groups(members))
}

fn random_index(r: &mut ChaCha8Rng, len: usize, max: usize) -> Arc<Vec<usize>> {
    Arc::new((0..len).map(|_| r.random_range(0..max)).collect())
}

type Check = fn(&mut ChaCha8Rng, u64) -> f64;

fn check_matmul(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (n, k) = dims(r);
    let m = r.random_range(1..5);
    let vals = [random_tensor(r, &[n, k], 1.0), random_tensor(r, &[k, m], 1.0)];
    gradcheck(&vals, |t, l| { let o = t.matmul(l[0], l[1]).unwrap(); project(t, o, s) }, STEP, FLOOR)
}

fn check_linear(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (n, k) = dims(r);
    let m = r.random_range(1..5);
    let vals = [random_tensor(r, &[n, k], 1.0), random_tensor(r, &[k, m], 1.0), random_tensor(r, &[m], 1.0)];
    gradcheck(&vals, |t, l| { let o = t.linear(l[0], l[1], Some(l[2])).unwrap(); project(t, o, s) }, STEP, FLOOR)
}

fn check_elementwise(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (n, c) = dims(r);
    let vals = [random_tensor(r, &[n, c], 1.0), random_tensor(r, &[n, c], 1.0)];
    gradcheck(
        &vals,
        |t, l| {
            let a = t.add(l[0], l[1]).unwrap();
            let b = t.sub(a, l[1]).unwrap();
            let b = t.sub(b, l[1]).unwrap();
            let m = t.mul(b, l[0]).unwrap();
            let m = t.scale(m, -1.7);
            project(t, m, s)
        },
        STEP,
        FLOOR,
    )
}

fn check_add_row(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (n, c) = dims(r);
    let vals = [random_tensor(r, &[n, c], 1.0), random_tensor(r, &[c], 1.0)];
    gradcheck(&vals, |t, l| { let o = t.add_row(l[0], l[1]).unwrap(); project(t, o, s) }, STEP, FLOOR)
}

fn check_relu(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (n, c) = dims(r);
    let vals = [away_from_zero(r, &[n, c], 0.01)];
    gradcheck(&vals, |t, l| { let o = t.relu(l[0]); project(t, o, s) }, STEP, FLOOR)
}

fn check_elu(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (n, c) = dims(r);
    let vals = [away_from_zero(r, &[n, c], 0.01)];
    gradcheck(&vals, |t, l| { let o = t.elu(l[0]); project(t, o, s) }, STEP, FLOOR)
}

fn check_reshape_concat(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (n, c) = dims(r);
    let c2 = r.random_range(1..4);
    let vals = [random_tensor(r, &[n, c], 1.0), random_tensor(r, &[n * c2], 1.0)];
    gradcheck(
        &vals,
        |t, l| {
            let b = t.reshape(l[1], vec![n, c2]).unwrap();
            let o = t.concat_cols(&[l[0], b, l[0]]).unwrap();
            project(t, o, s)
        },
        STEP,
        FLOOR,
    )
}

fn check_channels_last(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let b = r.random_range(1..3);
    let c = r.random_range(1..4);
    let d = r.random_range(1..4);
    let vals = [random_tensor(r, &[b, c, d, 2, 3], 1.0)];
    gradcheck(&vals, |t, l| { let o = t.channels_last(l[0]).unwrap(); project(t, o, s) }, STEP, FLOOR)
}

fn check_gather_rows(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (n, c) = dims(r);
    let len = r.random_range(1..9);
    let idx = random_index(r, len, n);
    let vals = [random_tensor(r, &[n, c], 1.0)];
    gradcheck(&vals, |t, l| { let o = t.gather_rows(l[0], idx.clone()).unwrap(); project(t, o, s) }, STEP, FLOOR)
}

fn check_segment_sum(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (n, c) = dims(r);
    let groups = r.random_range(1..5);
    let segs = random_groups(r, n, groups);
    let vals = [random_tensor(r, &[n, c], 1.0)];
    gradcheck(&vals, |t, l| { let o = t.segment_sum(l[0], segs.clone()).unwrap(); project(t, o, s) }, STEP, FLOOR)
}

fn check_gather_sum(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (n, c) = dims(r);
    let p = r.random_range(1..9);
    let i0 = random_index(r, p, n);
    let i1 = random_index(r, p, n + 1);
    let vals = [random_tensor(r, &[n, c], 1.0), random_tensor(r, &[n + 1, c], 1.0), random_tensor(r, &[c], 1.0)];
    gradcheck(
        &vals,
        |t, l| {
            let o = t.gather_sum(&[(l[0], i0.clone()), (l[1], i1.clone())], Some(l[2])).unwrap();
            project(t, o, s)
        },
        STEP,
        FLOOR,
    )
}

fn check_sum_mean_div(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (n, c) = dims(r);
    let mut d = random_tensor(r, &[1], 1.0);
    d.data_mut()[0] = 0.5 + d.data()[0].abs();
    let vals = [random_tensor(r, &[n, c], 1.0), d];
    gradcheck(
        &vals,
        |t, l| {
            let den = t.reshape(l[1], vec![]).unwrap();
            let q = t.div_scalar(l[0], den).unwrap();
            let m = t.mean(q);
            let sm = t.sum(l[0]);
            let p = project(t, q, s);
            let out = t.add(p, sm).unwrap();
            t.mul(out, m).unwrap()
        },
        STEP,
        FLOOR,
    )
}

fn check_conv3d(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let b = r.random_range(1..3);
    let cin = r.random_range(1..3);
    let cout = r.random_range(1..3);
    let k = r.random_range(1..4);
    let stride = r.random_range(1..3);
    let pad = r.random_range(0..2);
    let side = k + r.random_range(0..3);
    let vals = [
        random_tensor(r, &[b, cin, side, side, side], 1.0),
        random_tensor(r, &[cout, cin, k, k, k], 1.0),
        random_tensor(r, &[cout], 1.0),
    ];
    gradcheck(
        &vals,
        |t, l| { let o = t.conv3d(l[0], l[1], Some(l[2]), stride, pad).unwrap(); project(t, o, s) },
        STEP,
        FLOOR,
    )
}

fn check_batch_norm(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let n = r.random_range(2..7);
    let c = r.random_range(1..4);
    let vals = [random_tensor(r, &[n, c], 1.0), random_tensor(r, &[c], 1.0), random_tensor(r, &[c], 1.0)];
    let mean: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
    let train = gradcheck(
        &vals,
        |t, l| { let o = t.batch_norm_train(l[0], l[1], l[2], 1e-5).unwrap().out; project(t, o, s) },
        STEP,
        FLOOR,
    );
    let eval = gradcheck(
        &vals,
        |t, l| { let o = t.batch_norm_eval(l[0], l[1], l[2], &mean, &var, 1e-5).unwrap(); project(t, o, s) },
        STEP,
        FLOOR,
    );
    train.max(eval)
}

fn check_dropout(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (n, c) = dims(r);
    let vals = [random_tensor(r, &[n, c], 1.0)];
    gradcheck(
        &vals,
        |t, l| {
            let o = t.dropout(l[0], 0.5, &mut rng(s)).unwrap();
            project(t, o, s)
        },
        STEP,
        FLOOR,
    )
}

fn check_softmax(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let n = r.random_range(1..7);
    let c = r.random_range(2..4);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let weights: Vec<f64> = (0..n).map(|_| r.random_range(0.2..3.0)).collect();
    let class = r.random_range(0..c);
    let vals = [random_tensor(r, &[n, c], 2.0)];
    gradcheck(
        &vals,
        |t, l| {
            let ce = t.softmax_cross_entropy(l[0], &labels, Some(&weights)).unwrap();
            let plain = t.softmax_cross_entropy(l[0], &labels, None).unwrap();
            let pick = t.softmax_pick(l[0], class).unwrap();
            let p = project(t, pick, s);
            let a = t.add(ce, plain).unwrap();
            t.add(a, p).unwrap()
        },
        STEP,
        FLOOR,
    )
}

fn check_l1(r: &mut ChaCha8Rng, _s: u64) -> f64 {
    let (n, c) = dims(r);
    let x = random_tensor(r, &[n, c], 1.0);
    let mut target = x.clone();
    for v in target.data_mut() {
        *v += if r.random::<bool>() { 0.05 } else { -0.05 } + r.random_range(-0.04..0.04);
    }
    gradcheck(&[x], |t, l| t.l1_loss(l[0], &target, 3.0).unwrap(), STEP, FLOOR)
}

fn check_chamfer(r: &mut ChaCha8Rng, _s: u64) -> f64 {
    let n = r.random_range(1..8);
    let m = r.random_range(1..8);
    let target: Arc<Vec<[f64; 3]>> =
        Arc::new((0..m).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect());
    let mut w = random_tensor(r, &[n], 1.0);
    w.data_mut().iter_mut().for_each(|v| *v = 0.3 + v.abs());
    let vals = [random_tensor(r, &[n, 3], 1.0), w];
    gradcheck(
        &vals,
        |t, l| {
            let a = t.chamfer(l[0], Some(l[1]), target.clone()).unwrap();
            let b = t.chamfer(l[0], None, target.clone()).unwrap();
            t.add(a, b).unwrap()
        },
        STEP,
        FLOOR,
    )
}

pub const PRIMITIVES: [(&str, Check); 18] = [
    ("matmul", check_matmul),
    ("linear", check_linear),
    ("add/sub/mul/scale", check_elementwise),
    ("add_row", check_add_row),
    ("relu", check_relu),
    ("elu", check_elu),
    ("reshape/concat_cols", check_reshape_concat),
    ("channels_last", check_channels_last),
    ("gather_rows", check_gather_rows),
    ("segment_sum", check_segment_sum),
    ("gather_sum", check_gather_sum),
    ("sum/mean/div_scalar", check_sum_mean_div),
    ("conv3d", check_conv3d),
    ("batch_norm", check_batch_norm),
    ("dropout", check_dropout),
    ("softmax_ce/softmax_pick", check_softmax),
    ("l1_loss", check_l1),
    ("chamfer", check_chamfer),
];

fn random_points(r: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))).collect()
}

fn tensor_of(points: &[Vec3]) -> Tensor {
    Tensor::new(vec![points.len(), 3], points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).unwrap()
}

fn check_matched_l1(r: &mut ChaCha8Rng, _s: u64) -> f64 {
    let n = r.random_range(2..9);
    let m = r.random_range(1..=n);
    let target = random_points(r, m);
    // Redraw until every matched coordinate is clear of its target, so |·|
    // is smooth inside the stencil.
    let pred = loop {
        let pred = random_points(r, n);
        let a = Matcher::Hungarian.assign(&pred, &target);
        if a.pairs().all(|(i, j)| (0..3).all(|k| (pred[i][k] - target[j][k]).abs() > 1e-3)) {
            break pred;
        }
    };
    gradcheck(
        &[tensor_of(&pred)],
        |t, l| {
            let vals: Vec<Vec3> = t.value(l[0]).data().chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            matched_vertex_loss(t, l[0], 0, &vals, &target, Matcher::Hungarian, 1.0).unwrap().0
        },
        STEP,
        FLOOR,
    )
}

fn check_edge_ce(r: &mut ChaCha8Rng, _s: u64) -> f64 {
    let p = r.random_range(2..20);
    let mut labels: Vec<bool> = (0..p).map(|_| r.random_range(0.0..1.0) < 0.2).collect();
    labels[0] = true;
    let vals = [random_tensor(r, &[p, 2], 2.0)];
    gradcheck(&vals, |t, l| edge_ce_loss(t, l[0], &labels, ClassWeighting::default()).unwrap(), STEP, FLOOR)
}

fn check_face_ce(r: &mut ChaCha8Rng, _s: u64) -> f64 {
    let p = r.random_range(1..20);
    let labels: Vec<bool> = (0..p).map(|_| r.random::<bool>()).collect();
    let vals = [random_tensor(r, &[p, 2], 2.0)];
    gradcheck(&vals, |t, l| face_ce_loss(t, l[0], &labels).unwrap(), STEP, FLOOR)
}

fn check_chamfer_mesh(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let n = r.random_range(3..7);
    let verts = random_points(r, n);
    let mut all: Vec<[usize; 3]> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                all.push([i, j, k]);
            }
        }
    }
    all.shuffle(r);
    all.truncate(r.random_range(1..5));
    let faces = all;
    let m = r.random_range(5..30);
    let target: Arc<Vec<[f64; 3]>> =
        Arc::new(random_points(r, m).iter().map(|p| [p.x, p.y, p.z]).collect());
    let mut w = random_tensor(r, &[faces.len()], 1.0);
    w.data_mut().iter_mut().for_each(|v| *v = 0.2 + v.abs());
    let weighted = r.random::<bool>();
    gradcheck(
        &[tensor_of(&verts), w],
        |t, l| {
            let weights = weighted.then_some(l[1]);
            let out = chamfer_mesh_loss(t, l[0], &faces, weights, target.clone(), 64, s).unwrap();
            if weighted {
                out.loss
            } else {
                // Keep the weight leaf on the graph with a zero contribution.
                let z = t.scale(l[1], 0.0);
                let z = t.sum(z);
                t.add(out.loss, z).unwrap()
            }
        },
        STEP,
        FLOOR,
    )
}

pub const COMPOSED: [(&str, Check); 4] = [
    ("matched_vertex_loss", check_matched_l1),
    ("edge_ce_loss", check_edge_ce),
    ("face_ce_loss", check_face_ce),
    ("chamfer_mesh_loss", check_chamfer_mesh),
];

/// Worst relative error of each check over `configs` random configurations.
pub fn run(checks: &[(&'static str, Check)], configs: usize, seed: u64) -> Vec<(&'static str, f64)> {
    checks
        .iter()
        .enumerate()
        .map(|(c, &(name, f))| {
            let worst = (0..configs)
                .map(|i| {
                    let s = seed ^ ((c as u64) << 32 | i as u64);
                    f(&mut rng(s), s)
                })
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}
