use std::sync::Arc;

use facetnet::autodiff::Checkpoint;
use facetnet::losses::target_samples;
use facetnet::mesh::shapes::{builtin_corpus, BUILTIN_CLASSES};
use facetnet::model::{Model, ModelConfig, PredictOptions};
use facetnet::trainer::{
    check_stage_order, generate_dataset, stage_checkpoint, stage_of, DatasetIndex, FaceMode, GenOptions, Sample, Split,
    Stage, StepRecord, TrainConfig, TrainError, Trainer,
};
use facetnet::virtual_scan::scan_mesh;

fn small_model() -> ModelConfig {
    ModelConfig {
        n_vertices: 12,
        encoder_channels: [2, 2, 4, 4],
        vertex_hidden: 16,
        node_hidden: 8,
        edge_hidden: 8,
        face_hidden: 8,
        edge_rounds: 1,
        face_rounds: 1,
        ..Default::default()
    }
}

fn samples(count: usize, seed: u64) -> Vec<Sample> {
    builtin_corpus(count, &BUILTIN_CLASSES, seed)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let mesh = facetnet::mesh::decimate(&s.mesh, 30).unwrap();
            Sample {
                name: s.name,
                class: s.class,
                volume: Arc::new(scan_mesh(&s.mesh, 2, seed + i as u64).unwrap().volume),
                cloud: target_samples(&mesh, 256, i as u64).unwrap(),
                mesh: Arc::new(mesh),
            }
        })
        .collect()
}

fn config(stage: Stage) -> TrainConfig {
    TrainConfig { stage, batch_size: 2, max_steps: Some(3), seed: 5, model: small_model(), chamfer_samples: 256, ..Default::default() }
}

fn run(cfg: TrainConfig, model: Model, data: &[Sample]) -> (Model, Vec<StepRecord>) {
    let mut t = Trainer::new(cfg, model, data.to_vec(), Vec::new()).unwrap();
    let out = t.run(&mut |_| {}).unwrap();
    (out.model, out.records)
}

#[test]
fn identical_seeds_give_identical_loss_curves() {
    let data = samples(4, 1);
    for stage in [Stage::VertexEdge, Stage::FaceCe, Stage::FaceChamfer] {
        let a = run(config(stage), Model::new(small_model(), 2).unwrap(), &data).1;
        let b = run(config(stage), Model::new(small_model(), 2).unwrap(), &data).1;
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.loss.is_nan() && y.loss.is_nan() || (x.loss - y.loss).abs() <= 1e-6, "{} {} {}", stage, x.loss, y.loss);
        }
    }
}

#[test]
fn checkpoint_round_trip_keeps_outputs_bitwise() {
    let data = samples(3, 2);
    let (model, _) = run(config(Stage::VertexEdge), Model::new(small_model(), 3).unwrap(), &data);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    stage_checkpoint(&model, Stage::VertexEdge, &config(Stage::VertexEdge)).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(stage_of(&ck), Some(Stage::VertexEdge));
    let back = Model::from_checkpoint(&ck).unwrap();
    let opts = PredictOptions { edge_threshold: 0.3, ..Default::default() };
    for s in &data {
        let p = model.predict(&s.volume, &opts).unwrap();
        let q = back.predict(&s.volume, &opts).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.graph.edge_prob), bits(&q.graph.edge_prob));
        assert_eq!(bits(&p.face_prob), bits(&q.face_prob));
        assert_eq!(p.graph.positions, q.graph.positions);
    }
}

#[test]
fn stages_must_run_in_order() {
    let model = Model::new(small_model(), 0).unwrap();
    let untrained = model.to_checkpoint();
    let s1 = stage_checkpoint(&model, Stage::VertexEdge, &config(Stage::VertexEdge));
    let s2 = stage_checkpoint(&model, Stage::FaceCe, &config(Stage::FaceCe));
    assert!(check_stage_order(Stage::VertexEdge, None).is_ok());
    assert!(matches!(check_stage_order(Stage::FaceCe, None), Err(TrainError::StageOrder { .. })));
    assert!(check_stage_order(Stage::FaceCe, Some(&untrained)).is_err());
    assert!(check_stage_order(Stage::FaceCe, Some(&s1)).is_ok());
    assert!(check_stage_order(Stage::FaceChamfer, Some(&s1)).is_err());
    assert!(check_stage_order(Stage::FaceChamfer, Some(&s2)).is_ok());
}

#[test]
fn frozen_parts_do_not_move_in_face_stages() {
    let data = samples(2, 3);
    let start = Model::new(small_model(), 4).unwrap();
    let (after, _) = run(config(Stage::FaceCe), start.clone(), &data);
    for (name, p) in start.params.iter() {
        let q = after.params.get(name).unwrap();
        let moved = p.value != q.value;
        let face = name.starts_with("face");
        if !face {
            assert!(!moved, "{} changed in the face stage", name);
        }
    }
    assert!(start.params.iter().any(|(n, p)| n.starts_with("face") && p.value != after.params.get(n).unwrap().value));
}

#[test]
fn non_finite_input_aborts_with_context() {
    let mut data = samples(2, 4);
    let mut vol = (*data[0].volume).clone();
    vol.data[0] = f64::NAN;
    data[0].volume = Arc::new(vol);
    let mut t = Trainer::new(config(Stage::VertexEdge), Model::new(small_model(), 0).unwrap(), data, Vec::new()).unwrap();
    match t.run(&mut |_| {}) {
        Err(TrainError::NonFinite { stage, step, samples, grad_norms }) => {
            assert_eq!(stage, Stage::VertexEdge);
            assert_eq!(step, 1);
            assert_eq!(samples.len(), 2);
            assert!(!grad_norms.is_empty() && grad_norms.len() <= 10);
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.steps)),
    }
}

#[test]
fn direct_face_modes_train() {
    let data = samples(2, 5);
    for mode in [FaceMode::DirectGt, FaceMode::DirectSurface] {
        for stage in [Stage::FaceCe, Stage::FaceChamfer] {
            let cfg = TrainConfig { face_mode: mode, ..config(stage) };
            let (_, recs) = run(cfg, Model::new(small_model(), 1).unwrap(), &data);
            assert!(recs.iter().all(|r| r.loss.is_finite()), "{:?} {}", mode, stage);
        }
    }
}

#[test]
fn generated_dataset_round_trips_through_the_index() {
    let dir = tempfile::tempdir().unwrap();
    let shapes = builtin_corpus(6, &BUILTIN_CLASSES, 9);
    let opts = GenOptions { target_vertices: 30, val_fraction: 0.2, test_fraction: 0.2, ..Default::default() };
    let g = generate_dataset(&shapes, &opts, dir.path()).unwrap();
    assert!(g.skipped.is_empty());
    let idx = DatasetIndex::load(&g.index_path).unwrap();
    assert_eq!(idx.entries.len(), 12);
    let total: usize = [Split::Train, Split::Val, Split::Test].iter().map(|&s| idx.split(s).count()).sum();
    assert_eq!(total, 12);
    let train = idx.load_samples(Split::Train, 64).unwrap();
    assert!(train.iter().all(|s| s.mesh.vertex_count() <= 30 && s.cloud.len() == 64));
    let again = generate_dataset(&shapes, &opts, &dir.path().join("again")).unwrap();
    assert_eq!(
        again.index.entries.iter().map(|e| (&e.name, e.split)).collect::<Vec<_>>(),
        g.index.entries.iter().map(|e| (&e.name, e.split)).collect::<Vec<_>>()
    );
}
