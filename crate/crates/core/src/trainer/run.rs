use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::dataset::Sample;
use super::labels::{direct_gt_labels, direct_surface_labels};
use super::{FaceMode, Result, Stage, TrainConfig, TrainError};
use crate::autodiff::{Adam, Checkpoint, Tape, Var};
use crate::losses::{chamfer_mesh_loss, edge_ce_loss, edge_labels, face_ce_loss, matched_vertex_loss};
use crate::mesh::{build_dual_graph, dual_from_edges, DualGraph, Vec3, VertexEdgeGraph};
use crate::metrics::{distance_between, eval_mesh_distance};
use crate::model::{
    apply_bn_updates, direct_face_logits, edge_logits, encode, face_input, face_logits, lookup_f2, lookup_f2_rows,
    node_features, pair_matrix, check_dual_size, MAX_DUAL_EDGES, positions_from, positions_tensor, positive_probs, predict_vertices, volume_batch, Ctx, DirectInput,
    EncoderOut, Model, ModelError, PairIndex, PredictOptions, TripleIndex,
};

/// Checkpoint metadata key naming the last completed stage.
pub const META_STAGE: &str = "stage";
pub const META_TRAIN_CONFIG: &str = "train_config";

/// Samples used for the surface distance during validation.
const VAL_SAMPLES: usize = 2000;
/// Validation set size cap when falling back to training samples.
const VAL_FALLBACK: usize = 16;

/// Completed stage recorded in a checkpoint.
pub fn stage_of(ck: &Checkpoint) -> Option<Stage> {
    ck.meta.get(META_STAGE).and_then(|s| s.parse().ok())
}

/// Errors unless `ck` finished the stage `stage` builds on.
pub fn check_stage_order(stage: Stage, ck: Option<&Checkpoint>) -> Result<()> {
    let Some(needs) = stage.previous() else { return Ok(()) };
    let found = ck.and_then(stage_of);
    if found.is_some_and(|f| f >= needs) {
        return Ok(());
    }
    Err(TrainError::StageOrder {
        stage,
        needs,
        found: match (ck, found) {
            (None, _) => "no checkpoint".into(),
            (Some(_), None) => "an untrained checkpoint".into(),
            (Some(_), Some(f)) => f.name().into(),
        },
    })
}

pub fn stage_checkpoint(model: &Model, stage: Stage, cfg: &TrainConfig) -> Checkpoint {
    let mut ck = model.to_checkpoint();
    ck.meta.insert(META_STAGE.into(), stage.name().into());
    ck.meta.insert(META_TRAIN_CONFIG.into(), cfg.to_toml());
    ck
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub parts: BTreeMap<String, f64>,
    pub samples: Vec<String>,
    /// Samples of the batch without usable candidate faces (none, or a
    /// dual graph over the size cap).
    pub skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub model: Model,
    /// Weights with the lowest validation score and that score.
    pub best: Option<(f64, Model)>,
    pub records: Vec<StepRecord>,
    pub skipped_empty: usize,
    pub steps: usize,
}

impl StageOutcome {
    pub fn best_model(&self) -> &Model {
        self.best.as_ref().map(|b| &b.1).unwrap_or(&self.model)
    }
}

pub(super) struct StepOut {
    loss: f64,
    parts: BTreeMap<String, f64>,
    skipped: usize,
}

/// Runs one training stage over in-memory samples.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    adam: Adam,
    train: Vec<Sample>,
    val: Vec<Sample>,
    gt_duals: Vec<DualGraph>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Model, train: Vec<Sample>, val: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        if model.config != config.model {
            return Err(TrainError::Config(format!(
                "model config differs from the training config in: {}",
                model.config.differing_keys(&config.model).join(", ")
            )));
        }
        if train.is_empty() {
            return Err(TrainError::Dataset("no training samples".into()));
        }
        let gt_duals = if config.stage == Stage::FaceCe && config.face_mode == FaceMode::Dual {
            train.iter().map(|s| dual_from_edges(&s.mesh.vertices, &s.mesh.edges())).collect()
        } else {
            Vec::new()
        };
        Ok(Self { adam: Adam::new(config.lr), config, model, train, val, gt_duals })
    }

    /// Name prefixes held fixed in the current stage.
    pub fn frozen(&self) -> Vec<&'static str> {
        let unused = if self.config.face_mode.is_direct() { "face" } else { "direct" };
        match self.config.stage {
            Stage::VertexEdge => vec!["face", "direct"],
            Stage::FaceChamfer if self.config.unfreeze => vec![unused],
            Stage::FaceCe | Stage::FaceChamfer => vec!["enc", "vtx", "edge", unused],
        }
    }

    fn step_seed(&self, step: usize) -> u64 {
        let stage = self.config.stage as u64;
        self.config.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ ((step as u64) << 2 | stage)
    }

    /// Runs the configured number of epochs (or `max_steps`), calling `log`
    /// after every optimizer step.
    pub fn run(&mut self, log: &mut dyn FnMut(&StepRecord)) -> Result<StageOutcome> {
        let b = self.config.batch_size;
        let per_epoch = self.train.len().div_ceil(b);
        let total = self.config.max_steps.unwrap_or(self.config.epochs() * per_epoch);
        let mut records = Vec::new();
        let mut best: Option<(f64, Model)> = None;
        let mut skipped_empty = 0;
        let mut step = 0;
        let mut epoch = 0;
        let mut validated_at = None;
        while step < total {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9)));
            for chunk in order.chunks(b) {
                if step >= total {
                    break;
                }
                self.adam.lr = self.config.lr_at(step, total);
                let out = self.step(chunk, step)?;
                step += 1;
                skipped_empty += out.skipped;
                let mut rec = StepRecord {
                    stage: self.config.stage,
                    step,
                    epoch,
                    loss: out.loss,
                    parts: out.parts,
                    samples: chunk.iter().map(|&i| self.train[i].name.clone()).collect(),
                    skipped: out.skipped,
                    val: None,
                };
                let every = self.config.val_every;
                let epoch_end = every == 0 && (step % per_epoch == 0 || step == total);
                if (every > 0 && step % every == 0) || epoch_end || (step == total && validated_at.is_none()) {
                    let v = self.validate()?;
                    validated_at = Some(step);
                    rec.val = Some(v);
                    if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                        best = Some((v, self.model.clone()));
                    }
                }
                log(&rec);
                records.push(rec);
            }
            epoch += 1;
        }
        Ok(StageOutcome { model: self.model.clone(), best, records, skipped_empty, steps: step })
    }

    /// Forward, backward and one ADAM update on the samples at `batch`.
    pub(super) fn step(&mut self, batch: &[usize], step: usize) -> Result<StepOut> {
        let samples: Vec<&Sample> = batch.iter().map(|&i| &self.train[i]).collect();
        let frozen = self.frozen();
        let seed = self.step_seed(step);
        let mut ctx = Ctx::new(&self.model.params, true, &frozen, seed);
        let (loss, parts, skipped) = match (self.config.stage, self.config.face_mode) {
            (Stage::VertexEdge, _) => vertex_edge_loss(&mut ctx, &self.config, &samples)?,
            (Stage::FaceCe, FaceMode::Dual) => {
                let duals: Vec<&DualGraph> = batch.iter().map(|&i| &self.gt_duals[i]).collect();
                gt_dual_loss(&mut ctx, &self.config, &samples, &duals)?
            }
            (Stage::FaceCe, _) => direct_ce_loss(&mut ctx, &self.config, &samples)?,
            (Stage::FaceChamfer, _) => face_chamfer_loss(&mut ctx, &self.config, &samples, seed)?,
        };
        let Some(loss) = loss else {
            return Ok(StepOut { loss: f64::NAN, parts, skipped });
        };
        let value = ctx.tape.item(loss);
        let (mut tape, bound, bn) = ctx.into_parts();
        tape.backward(loss)?;
        let store = &mut self.model.params;
        store.zero_grads();
        store.accumulate_grads(&tape, &bound);
        drop(tape);
        let norms = store.grad_norms();
        if !value.is_finite() || norms.values().any(|g| !g.is_finite()) {
            let mut grad_norms: Vec<(String, f64)> = norms.into_iter().collect();
            grad_norms.sort_by(|a, b| b.1.total_cmp(&a.1));
            grad_norms.truncate(10);
            return Err(TrainError::NonFinite {
                stage: self.config.stage,
                step: step + 1,
                samples: samples.iter().map(|s| s.name.clone()).collect(),
                grad_norms,
            });
        }
        let names: Vec<String> = norms.into_keys().collect();
        self.adam.step(store, &names)?;
        apply_bn_updates(store, &bn);
        Ok(StepOut { loss: value, parts, skipped })
    }

    /// Mean validation score: vertex-cloud chamfer after the vertex/edge
    /// stage, surface distance of the predicted mesh after face stages.
    pub fn validate(&self) -> Result<f64> {
        let set: Vec<&Sample> = if self.val.is_empty() {
            self.train.iter().take(VAL_FALLBACK).collect()
        } else {
            self.val.iter().collect()
        };
        let mut total = 0.0;
        for s in &set {
            total += match self.config.stage {
                Stage::VertexEdge => {
                    let v = self.model.vertices(&s.volume)?;
                    distance_between(&v, &s.mesh.vertices)
                }
                _ => {
                    let opts = PredictOptions {
                        edge_threshold: self.config.edge_threshold,
                        direct_faces: self.config.face_mode.is_direct(),
                        ..Default::default()
                    };
                    let cloud = || -> Vec<Vec3> { s.cloud.iter().map(|c| Vec3::new(c[0], c[1], c[2])).collect() };
                    match self.model.predict(&s.volume, &opts) {
                        Ok(p) => match eval_mesh_distance(&p.mesh, &s.mesh, VAL_SAMPLES) {
                            Ok(d) => d,
                            Err(_) => distance_between(&p.mesh.vertices, &cloud()),
                        },
                        Err(ModelError::DualTooLarge { .. }) => {
                            distance_between(&self.model.vertices(&s.volume)?, &cloud())
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            };
        }
        Ok(total / set.len() as f64)
    }
}

type LossParts = (Option<Var>, BTreeMap<String, f64>, usize);

fn encode_batch(ctx: &mut Ctx, cfg: &TrainConfig, samples: &[&Sample]) -> Result<EncoderOut> {
    let vols: Vec<_> = samples.iter().map(|s| s.volume.as_ref()).collect();
    let input = ctx.tape.constant(volume_batch(&vols)?);
    Ok(encode(ctx, &cfg.model, input)?)
}

fn f2_rows(samples: &[&Sample], vals: &[Vec3], n: usize) -> Vec<usize> {
    samples
        .iter()
        .enumerate()
        .flat_map(|(b, s)| lookup_f2_rows(&vals[b * n..(b + 1) * n], &s.volume.transform, s.volume.resolution, b))
        .collect()
}

fn add_all(tape: &mut Tape, terms: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &t in terms {
        acc = Some(match acc {
            None => t,
            Some(a) => tape.add(a, t)?,
        });
    }
    Ok(acc)
}

/// Edge logits over all vertex pairs of every sample.
fn batch_edge_logits(ctx: &mut Ctx, cfg: &TrainConfig, samples: &[&Sample], enc: &EncoderOut, v: Var, vals: &[Vec3]) -> Result<(Var, PairIndex)> {
    let n = cfg.model.n_vertices;
    let feat = lookup_f2(ctx, enc.f2, f2_rows(samples, vals, n))?;
    let h0 = node_features(ctx, &cfg.model, "edge", v, feat)?;
    let index = PairIndex::new(&vec![n; samples.len()]);
    let logits = edge_logits(ctx, &cfg.model, h0, &index)?;
    Ok((logits, index))
}

/// Matched ℓ1 (mean over the batch) plus `λ_edge` times the edge CE.
fn vertex_edge_loss(ctx: &mut Ctx, cfg: &TrainConfig, samples: &[&Sample]) -> Result<LossParts> {
    let n = cfg.model.n_vertices;
    let bsz = samples.len();
    let enc = encode_batch(ctx, cfg, samples)?;
    let v = predict_vertices(ctx, &cfg.model, enc.f)?;
    let vals = positions_from(ctx.tape.value(v));
    let mut l1_terms = Vec::with_capacity(bsz);
    let mut assignments = Vec::with_capacity(bsz);
    for (b, s) in samples.iter().enumerate() {
        let (l, a) = matched_vertex_loss(
            &mut ctx.tape,
            v,
            b * n,
            &vals[b * n..(b + 1) * n],
            &s.mesh.vertices,
            cfg.matcher,
            1.0 / bsz as f64,
        )?;
        l1_terms.push(l);
        assignments.push(a);
    }
    let l1 = add_all(&mut ctx.tape, &l1_terms)?.expect("non-empty batch");
    let edge_pos = if cfg.detach_edge_positions { ctx.tape.constant(positions_tensor(&vals)) } else { v };
    let (logits, index) = batch_edge_logits(ctx, cfg, samples, &enc, edge_pos, &vals)?;
    let mut labels = Vec::with_capacity(index.unordered.len());
    for (b, s) in samples.iter().enumerate() {
        let range = index.unordered_offsets[b]..index.unordered_offsets[b + 1];
        let pairs: Vec<(usize, usize)> = index.unordered[range].iter().map(|&(_, i, j)| (i, j)).collect();
        labels.extend(edge_labels(&assignments[b], &s.mesh, &pairs));
    }
    let ce = edge_ce_loss(&mut ctx.tape, logits, &labels, cfg.edge_weighting)?;
    let mut parts = BTreeMap::new();
    parts.insert("l1".to_string(), ctx.tape.item(l1));
    parts.insert("edge_ce".to_string(), ctx.tape.item(ce));
    let weighted = ctx.tape.scale(ce, cfg.lambda_edge);
    let total = ctx.tape.add(l1, weighted)?;
    Ok((Some(total), parts, 0))
}

/// Face CE on dual graphs of the ground-truth meshes.
fn gt_dual_loss(ctx: &mut Ctx, cfg: &TrainConfig, samples: &[&Sample], duals: &[&DualGraph]) -> Result<LossParts> {
    let enc = encode_batch(ctx, cfg, samples)?;
    let transforms: Vec<_> = samples.iter().map(|s| s.volume.transform).collect();
    let input = face_input(duals, &transforms, samples[0].volume.resolution);
    let labels: Vec<bool> = samples.iter().zip(duals).flat_map(|(s, d)| d.face_labels(&s.mesh, Some)).collect();
    if labels.is_empty() {
        return Ok((None, BTreeMap::new(), samples.len()));
    }
    let logits = face_logits(ctx, &cfg.model, enc.f2, &input)?;
    let ce = face_ce_loss(&mut ctx.tape, logits, &labels)?;
    let parts = BTreeMap::from([("face_ce".to_string(), ctx.tape.item(ce))]);
    Ok((Some(ce), parts, 0))
}

/// Direct-classifier logits for all triples of the predicted vertices.
fn batch_direct_logits(ctx: &mut Ctx, cfg: &TrainConfig, samples: &[&Sample], enc: &EncoderOut, v: Var, vals: &[Vec3]) -> Result<(Var, TripleIndex)> {
    let n = cfg.model.n_vertices;
    let feat = lookup_f2(ctx, enc.f2, f2_rows(samples, vals, n))?;
    let h0 = node_features(ctx, &cfg.model, "direct", v, feat)?;
    let input = DirectInput { index: TripleIndex::new(&vec![n; samples.len()]) };
    let logits = direct_face_logits(ctx, &cfg.model, h0, &input)?;
    Ok((logits, input.index))
}

fn triples_of(index: &TripleIndex, b: usize) -> Vec<[usize; 3]> {
    index.unordered[index.unordered_offsets[b]..index.unordered_offsets[b + 1]].iter().map(|u| u.1).collect()
}

/// Face CE of the direct triple classifier on predicted vertices.
fn direct_ce_loss(ctx: &mut Ctx, cfg: &TrainConfig, samples: &[&Sample]) -> Result<LossParts> {
    let n = cfg.model.n_vertices;
    let enc = encode_batch(ctx, cfg, samples)?;
    let v = predict_vertices(ctx, &cfg.model, enc.f)?;
    let vals = positions_from(ctx.tape.value(v));
    let (logits, index) = batch_direct_logits(ctx, cfg, samples, &enc, v, &vals)?;
    let mut labels = Vec::with_capacity(index.unordered.len());
    for (b, s) in samples.iter().enumerate() {
        let pos = &vals[b * n..(b + 1) * n];
        let triples = triples_of(&index, b);
        labels.extend(match cfg.face_mode {
            FaceMode::DirectSurface => {
                direct_surface_labels(pos, &s.mesh, &triples, cfg.surface_voxels / s.volume.transform.scale)
            }
            _ => direct_gt_labels(&cfg.matcher.assign(pos, &s.mesh.vertices), &s.mesh, &triples),
        });
    }
    let ce = face_ce_loss(&mut ctx.tape, logits, &labels)?;
    let parts = BTreeMap::from([("face_ce".to_string(), ctx.tape.item(ce))]);
    Ok((Some(ce), parts, 0))
}

/// Probability-weighted chamfer between the candidate faces of the predicted
/// vertex/edge graph and each target.
fn face_chamfer_loss(ctx: &mut Ctx, cfg: &TrainConfig, samples: &[&Sample], seed: u64) -> Result<LossParts> {
    let n = cfg.model.n_vertices;
    let enc = encode_batch(ctx, cfg, samples)?;
    let v = predict_vertices(ctx, &cfg.model, enc.f)?;
    let vals = positions_from(ctx.tape.value(v));

    let (logits, candidates) = if cfg.face_mode.is_direct() {
        let (logits, index) = batch_direct_logits(ctx, cfg, samples, &enc, v, &vals)?;
        let tris: Vec<Vec<[usize; 3]>> = (0..samples.len()).map(|b| triples_of(&index, b)).collect();
        (logits, tris)
    } else {
        let (edge, index) = batch_edge_logits(ctx, cfg, samples, &enc, v, &vals)?;
        let probs = positive_probs(ctx.tape.value(edge));
        let duals: Vec<DualGraph> = (0..samples.len())
            .map(|b| {
                let pos = vals[b * n..(b + 1) * n].to_vec();
                let m = pair_matrix(n, &index, b, &probs);
                let g = VertexEdgeGraph::from_probabilities(pos, m, cfg.edge_threshold);
                match check_dual_size(&g, MAX_DUAL_EDGES) {
                    Ok(()) => build_dual_graph(&g),
                    Err(_) => DualGraph::default(),
                }
            })
            .collect();
        let refs: Vec<&DualGraph> = duals.iter().collect();
        let transforms: Vec<_> = samples.iter().map(|s| s.volume.transform).collect();
        let input = face_input(&refs, &transforms, samples[0].volume.resolution);
        let logits = face_logits(ctx, &cfg.model, enc.f2, &input)?;
        (logits, duals.into_iter().map(|d| d.triangles).collect())
    };

    let total_rows: usize = candidates.iter().map(Vec::len).sum();
    let mut skipped = candidates.iter().filter(|c| c.is_empty()).count();
    if total_rows == 0 {
        return Ok((None, BTreeMap::new(), skipped));
    }
    let p = ctx.tape.softmax_pick(logits, 1)?;
    let pcol = ctx.tape.reshape(p, vec![total_rows, 1])?;
    let mut terms = Vec::new();
    let mut fallbacks = 0;
    let mut offset = 0;
    for (b, (s, tris)) in samples.iter().zip(&candidates).enumerate() {
        let rows: Vec<usize> = (offset..offset + tris.len()).collect();
        offset += tris.len();
        if tris.is_empty() {
            continue;
        }
        let w = ctx.tape.gather_rows(pcol, Arc::new(rows))?;
        let w = ctx.tape.reshape(w, vec![tris.len()])?;
        let vb = ctx.tape.gather_rows(v, Arc::new((b * n..(b + 1) * n).collect()))?;
        let out = chamfer_mesh_loss(
            &mut ctx.tape,
            vb,
            tris,
            Some(w),
            s.cloud.clone(),
            cfg.chamfer_samples,
            seed.wrapping_add(b as u64),
        )?;
        if out.vertex_fallback {
            fallbacks += 1;
        }
        terms.push(out.loss);
    }
    if terms.is_empty() {
        skipped = samples.len();
        return Ok((None, BTreeMap::new(), skipped));
    }
    let count = terms.len();
    let sum = add_all(&mut ctx.tape, &terms)?.expect("non-empty");
    let loss = ctx.tape.scale(sum, 1.0 / count as f64);
    let mut parts = BTreeMap::new();
    parts.insert("chamfer".to_string(), ctx.tape.item(loss));
    parts.insert("vertex_fallbacks".to_string(), fallbacks as f64);
    Ok((Some(loss), parts, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn stage_order_rules() {
        let model = Model::new(ModelConfig { n_vertices: 8, ..Default::default() }, 0).unwrap();
        let cfg = TrainConfig::default();
        assert!(check_stage_order(Stage::VertexEdge, None).is_ok());
        assert!(matches!(check_stage_order(Stage::FaceCe, None), Err(TrainError::StageOrder { .. })));
        let raw = model.to_checkpoint();
        assert!(check_stage_order(Stage::FaceCe, Some(&raw)).is_err());
        let s1 = stage_checkpoint(&model, Stage::VertexEdge, &cfg);
        assert_eq!(stage_of(&s1), Some(Stage::VertexEdge));
        check_stage_order(Stage::FaceCe, Some(&s1)).unwrap();
        let err = check_stage_order(Stage::FaceChamfer, Some(&s1)).unwrap_err().to_string();
        assert!(err.contains("face_ce") && err.contains("vertex_edge"), "{}", err);
        let s2 = stage_checkpoint(&model, Stage::FaceCe, &cfg);
        check_stage_order(Stage::FaceChamfer, Some(&s2)).unwrap();
        check_stage_order(Stage::FaceCe, Some(&s2)).unwrap();
    }
}
