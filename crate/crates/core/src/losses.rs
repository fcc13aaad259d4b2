//! Differentiable training losses.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{greedy_match, hungarian, vertex_cost_matrix, Assignment};
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::mesh::{sample_surface, Edge, IndexedFaceSet, MeshError, Vec3};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("target has no vertices")]
    EmptyTarget,
    #[error("prediction has no points")]
    EmptyPrediction,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Samples drawn from each mesh for the training chamfer.
pub const TRAIN_CHAMFER_SAMPLES: usize = 2048;
/// Cap on the positive-class weight of the edge loss.
pub const EDGE_POS_WEIGHT_CAP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    #[default]
    Hungarian,
    Greedy,
}

impl Matcher {
    pub fn assign(self, pred: &[Vec3], target: &[Vec3]) -> Assignment {
        let cost = vertex_cost_matrix(pred, target);
        match self {
            Matcher::Hungarian => hungarian(&cost),
            Matcher::Greedy => greedy_match(&cost),
        }
    }
}

/// Matches `pred` (rows `offset..offset + n` of `pred_var`, values
/// `pred_vals`) to `target` and returns the mean ℓ1 distance over matched
/// pairs, scaled by `scale`. The assignment is a constant of the step.
pub fn matched_vertex_loss(
    tape: &mut Tape,
    pred_var: Var,
    offset: usize,
    pred_vals: &[Vec3],
    target: &[Vec3],
    matcher: Matcher,
    scale: f64,
) -> Result<(Var, Assignment)> {
    if target.is_empty() {
        return Err(LossError::EmptyTarget);
    }
    if pred_vals.is_empty() {
        return Err(LossError::EmptyPrediction);
    }
    let a = matcher.assign(pred_vals, target);
    let (rows, cols): (Vec<usize>, Vec<usize>) = a.pairs().map(|(r, c)| (offset + r, c)).unzip();
    let k = rows.len();
    let picked = tape.gather_rows(pred_var, Arc::new(rows))?;
    let t = Tensor::new(vec![k, 3], cols.iter().flat_map(|&c| [target[c].x, target[c].y, target[c].z]).collect())?;
    let loss = tape.l1_loss(picked, &t, k as f64 / scale)?;
    Ok((loss, a))
}

/// Label of every vertex pair `(i, j)` in `pairs`: whether both ends are
/// matched and their targets share a mesh edge.
pub fn edge_labels(assignment: &Assignment, target: &IndexedFaceSet, pairs: &[(usize, usize)]) -> Vec<bool> {
    let edges: HashSet<Edge> = target.edges().into_iter().collect();
    pairs
        .iter()
        .map(|&(i, j)| match (assignment.mapping[i], assignment.mapping[j]) {
            (Some(a), Some(b)) => edges.contains(&Edge::new(a, b)),
            _ => false,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClassWeighting {
    Uniform,
    /// Positives weighted by `#neg / #pos`, capped.
    Balanced { cap: f64 },
}

impl Default for ClassWeighting {
    fn default() -> Self {
        ClassWeighting::Balanced { cap: EDGE_POS_WEIGHT_CAP }
    }
}

impl ClassWeighting {
    pub fn weights(&self, labels: &[bool]) -> Vec<f64> {
        let pos = labels.iter().filter(|&&l| l).count();
        let neg = labels.len() - pos;
        let w = match *self {
            ClassWeighting::Balanced { cap } if pos > 0 => (neg as f64 / pos as f64).min(cap).max(1.0),
            _ => 1.0,
        };
        labels.iter().map(|&l| if l { w } else { 1.0 }).collect()
    }
}

/// Weighted mean 2-class cross entropy over unordered vertex pairs.
pub fn edge_ce_loss(tape: &mut Tape, logits: Var, labels: &[bool], weighting: ClassWeighting) -> Result<Var> {
    let ids: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let w = weighting.weights(labels);
    Ok(tape.softmax_cross_entropy(logits, &ids, Some(&w))?)
}

/// Mean 2-class cross entropy over dual-graph nodes.
pub fn face_ce_loss(tape: &mut Tape, logits: Var, labels: &[bool]) -> Result<Var> {
    let ids: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    Ok(tape.softmax_cross_entropy(logits, &ids, None)?)
}

#[derive(Debug, Clone, Copy)]
pub struct ChamferOutput {
    pub loss: Var,
    /// No face had area, so the vertices themselves were used as samples.
    pub vertex_fallback: bool,
}

/// Target point cloud for [`chamfer_mesh_loss`].
pub fn target_samples(mesh: &IndexedFaceSet, k: usize, seed: u64) -> Result<Arc<Vec<[f64; 3]>>> {
    let s = sample_surface(mesh, k, seed)?;
    Ok(Arc::new(s.iter().map(|p| [p.point.x, p.point.y, p.point.z]).collect()))
}

/// Symmetric squared chamfer between `k` points sampled on the predicted
/// faces and a fixed target cloud.
///
/// Faces are chosen proportionally to their current area with fixed
/// barycentric coordinates, so points move with the vertices. With
/// `face_weights` (`[F]`, e.g. face probabilities), every point carries its
/// face's weight divided by the mean sampled weight; equal weights give the
/// unweighted loss. Without any positive-area face the loss falls back to
/// the vertex cloud.
pub fn chamfer_mesh_loss(
    tape: &mut Tape,
    vertices: Var,
    faces: &[[usize; 3]],
    face_weights: Option<Var>,
    target: Arc<Vec<[f64; 3]>>,
    k: usize,
    seed: u64,
) -> Result<ChamferOutput> {
    let vals: Vec<Vec3> = tape.value(vertices).data().chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    if vals.is_empty() {
        return Err(LossError::EmptyPrediction);
    }
    let mesh = IndexedFaceSet { vertices: vals, faces: faces.to_vec() };
    let samples = match sample_surface(&mesh, k, seed) {
        Ok(s) => s,
        Err(MeshError::ZeroArea) => {
            let loss = tape.chamfer(vertices, None, target)?;
            return Ok(ChamferOutput { loss, vertex_fallback: true });
        }
        Err(e) => return Err(e.into()),
    };
    let mut points = None;
    for c in 0..3 {
        let idx: Vec<usize> = samples.iter().map(|s| faces[s.face][c]).collect();
        let g = tape.gather_rows(vertices, Arc::new(idx))?;
        let b = Tensor::new(vec![samples.len(), 3], samples.iter().flat_map(|s| [s.bary[c]; 3]).collect())?;
        let b = tape.constant(b);
        let term = tape.mul(g, b)?;
        points = Some(match points {
            None => term,
            Some(p) => tape.add(p, term)?,
        });
    }
    let points = points.expect("three corners");
    let weights = match face_weights {
        Some(w) => {
            let col = tape.reshape(w, vec![faces.len(), 1])?;
            let per = tape.gather_rows(col, Arc::new(samples.iter().map(|s| s.face).collect()))?;
            let per = tape.reshape(per, vec![samples.len()])?;
            let mean = tape.mean(per);
            Some(tape.div_scalar(per, mean)?)
        }
        None => None,
    };
    let loss = tape.chamfer(points, weights, target)?;
    Ok(ChamferOutput { loss, vertex_fallback: false })
}
