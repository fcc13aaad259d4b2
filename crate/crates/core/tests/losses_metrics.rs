mod common;

use std::sync::Arc;

use facetnet::autodiff::{Tape, Tensor};
use facetnet::losses::{chamfer_mesh_loss, edge_ce_loss, matched_vertex_loss, target_samples, ClassWeighting, Matcher};
use facetnet::mesh::shapes::{builtin_corpus, box_mesh, icosphere, BUILTIN_CLASSES};
use facetnet::mesh::{decimate, IndexedFaceSet, Vec3};
use facetnet::metrics::{eval_mesh_distance, eval_normal_similarity, EvalReport, PointGrid, EVAL_SAMPLES, NORMAL_WINDOW};
use proptest::prelude::*;
use rand::Rng;

fn square(z: f64) -> IndexedFaceSet {
    let v = vec![Vec3::new(0.0, 0.0, z), Vec3::new(1.0, 0.0, z), Vec3::new(1.0, 1.0, z), Vec3::new(0.0, 1.0, z)];
    IndexedFaceSet::new(v, vec![[0, 1, 2], [0, 2, 3]]).unwrap()
}

/// Unit square in the `x = 0` plane, spanning the same `y` range.
fn wall() -> IndexedFaceSet {
    let v = vec![Vec3::new(0.5, 0.0, -0.5), Vec3::new(0.5, 1.0, -0.5), Vec3::new(0.5, 1.0, 0.5), Vec3::new(0.5, 0.0, 0.5)];
    IndexedFaceSet::new(v, vec![[0, 1, 2], [0, 2, 3]]).unwrap()
}

#[test]
fn self_metrics_on_corpus_meshes() {
    let shapes = builtin_corpus(10, &BUILTIN_CLASSES, 21);
    assert_eq!(shapes.len(), 10);
    for s in &shapes {
        let d = eval_mesh_distance(&s.mesh, &s.mesh, EVAL_SAMPLES).unwrap();
        let n = eval_normal_similarity(&s.mesh, &s.mesh, EVAL_SAMPLES, NORMAL_WINDOW).unwrap();
        assert!(d < 1e-3, "{} dist {}", s.name, d);
        assert!(n > 0.999, "{} nsim {}", s.name, n);
    }
}

#[test]
fn orthogonal_planes_have_low_normal_similarity() {
    let n = eval_normal_similarity(&square(0.0), &wall(), EVAL_SAMPLES, NORMAL_WINDOW).unwrap();
    assert!(n < 0.05, "{}", n);
    let same = eval_normal_similarity(&square(0.0), &square(0.1), EVAL_SAMPLES, NORMAL_WINDOW).unwrap();
    assert!(same > 0.999, "{}", same);
}

#[test]
fn parallel_squares_distance_and_chamfer() {
    for d in [0.05, 0.1, 0.2] {
        let dist = eval_mesh_distance(&square(0.0), &square(d), EVAL_SAMPLES).unwrap();
        assert!((dist - d).abs() < 0.05 * d, "d {} dist {}", d, dist);

        let a = square(0.0);
        let mut t = Tape::new();
        let v = t.leaf(Tensor::new(vec![4, 3], a.vertices.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).unwrap(), true);
        let target = target_samples(&square(d), 20_000, 3).unwrap();
        let out = chamfer_mesh_loss(&mut t, v, &a.faces, None, target, 20_000, 4).unwrap();
        let c = t.item(out.loss);
        assert!((c - 2.0 * d * d).abs() < 0.1 * d * d, "d {} chamfer {}", d, c);
    }
}

#[test]
fn decimated_mesh_is_near_its_source() {
    let src = icosphere(3);
    let dec = decimate(&src, 100).unwrap();
    let d = eval_mesh_distance(&src, &dec, EVAL_SAMPLES).unwrap();
    assert!(d < 0.02 * src.bbox_diagonal(), "{}", d);
}

#[test]
fn matched_l1_gradient_is_sign_over_count() {
    let mut r = common::rng(5);
    for _ in 0..20 {
        let n = r.random_range(1..10);
        let target: Vec<Vec3> = (0..n).map(|_| Vec3::new(r.random(), r.random(), r.random())).collect();
        let pred: Vec<Vec3> = target.iter().map(|p| p + Vec3::new(r.random_range(-0.1..0.1), 0.2, -0.3)).collect();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![n, 3], pred.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).unwrap(), true);
        let (loss, a) = matched_vertex_loss(&mut t, x, 0, &pred, &target, Matcher::Hungarian, 1.0).unwrap();
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        for (i, j) in a.pairs() {
            for k in 0..3 {
                let want = (pred[i][k] - target[j][k]).signum() / n as f64;
                assert_eq!(g[3 * i + k], want);
            }
        }
    }
}

#[test]
fn balanced_edge_weights_are_capped() {
    let mut labels = vec![false; 1000];
    labels[0] = true;
    let w = ClassWeighting::default().weights(&labels);
    assert_eq!(w[0], 50.0);
    assert_eq!(w[1], 1.0);
    labels.iter_mut().take(800).for_each(|l| *l = true);
    assert_eq!(ClassWeighting::default().weights(&labels)[0], 1.0);
    assert!(ClassWeighting::Uniform.weights(&labels).iter().all(|&w| w == 1.0));
}

#[test]
fn edge_ce_of_confident_correct_logits_is_small() {
    let labels = [true, false, false, true];
    let logits = Tensor::new(vec![4, 2], vec![-9.0, 9.0, 9.0, -9.0, 9.0, -9.0, -9.0, 9.0]).unwrap();
    let mut t = Tape::new();
    let l = t.leaf(logits, true);
    let ce = edge_ce_loss(&mut t, l, &labels, ClassWeighting::default()).unwrap();
    assert!(t.item(ce) < 1e-6);
}

#[test]
fn report_csv_has_one_row_per_mesh_plus_summary() {
    let mut rep = EvalReport::default();
    let b = box_mesh(Vec3::new(1.0, 1.0, 1.0));
    rep.push("a", "box", &b, &b).unwrap();
    rep.push("b", "box", &b, &b.translated(Vec3::new(0.0, 0.0, 0.1))).unwrap();
    let mut buf = Vec::new();
    rep.write_rows_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    let summary = rep.summary();
    assert_eq!(summary.last().unwrap().class, "mean");
    assert_eq!(summary[0].count, 2);
}

fn brute_nearest(points: &[Vec3], p: &Vec3) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, q) in points.iter().enumerate() {
        let d = (q - p).norm();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn point_grid_matches_brute_force(seed in 0u64..10_000, n in 1usize..300, flat in any::<bool>()) {
        let mut r = common::rng(seed);
        let pts: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), if flat { 0.0 } else { r.random_range(-1.0..1.0) }))
            .collect();
        let grid = PointGrid::new(&pts);
        for _ in 0..20 {
            let q = Vec3::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
            let (i, d) = grid.nearest(&q).unwrap();
            let (bi, bd) = brute_nearest(&pts, &q);
            prop_assert_eq!(d, bd);
            prop_assert!(i == bi || (pts[i] - q).norm() == bd);
            let radius = r.random_range(0.0..0.8);
            let mut got = grid.within(&q, radius);
            got.sort_unstable();
            let want: Vec<usize> = (0..n).filter(|&k| (pts[k] - q).norm() <= radius).collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn eval_distance_is_symmetric(seed in 0u64..50) {
        let s = builtin_corpus(2, &BUILTIN_CLASSES, seed);
        let ab = eval_mesh_distance(&s[0].mesh, &s[1].mesh, 2000).unwrap();
        let ba = eval_mesh_distance(&s[1].mesh, &s[0].mesh, 2000).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn chamfer_is_zero_on_its_own_samples(seed in 0u64..100) {
        let m = icosphere(1);
        let target = target_samples(&m, 500, seed).unwrap();
        let pts: Vec<f64> = target.iter().flatten().copied().collect();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![500, 3], pts).unwrap(), true);
        let c = t.chamfer(x, None, Arc::clone(&target)).unwrap();
        prop_assert_eq!(t.item(c), 0.0);
    }
}
