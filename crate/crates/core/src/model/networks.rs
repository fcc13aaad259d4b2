use std::sync::Arc;

use super::{Ctx, DualIndex, ModelConfig, PairIndex, Result, TripleIndex, F2_SIDE, FACE_INPUT_DIM};
use crate::autodiff::{Tensor, Var};
use crate::mesh::{FaceFeatures, Vec3};
use crate::virtual_scan::GridTransform;

/// Vertex head: `[B, 256]` codes to `[B·n, 3]` positions.
pub fn predict_vertices(ctx: &mut Ctx, cfg: &ModelConfig, f: Var) -> Result<Var> {
    let batch = ctx.tape.shape(f)[0];
    let h = ctx.linear("vtx.l1", f)?;
    let h = ctx.tape.elu(h);
    let out = ctx.linear("vtx.l2", h)?;
    Ok(ctx.tape.reshape(out, vec![batch * cfg.n_vertices, 3])?)
}

/// Rows of the channels-last coarse grid nearest to each position of sample
/// `sample`. Out-of-grid positions clamp to the boundary cell.
pub fn lookup_f2_rows(positions: &[Vec3], transform: &GridTransform, resolution: usize, sample: usize) -> Vec<usize> {
    let cell = resolution as f64 / F2_SIDE as f64;
    let base = sample * F2_SIDE.pow(3);
    positions
        .iter()
        .map(|p| {
            let g = transform.to_grid(p);
            let c = |v: f64| ((v / cell).floor().max(0.0) as usize).min(F2_SIDE - 1);
            base + (c(g.z) * F2_SIDE + c(g.y)) * F2_SIDE + c(g.x)
        })
        .collect()
}

pub fn lookup_f2(ctx: &mut Ctx, f2: Var, rows: Vec<usize>) -> Result<Var> {
    Ok(ctx.tape.gather_rows(f2, Arc::new(rows))?)
}

/// Initial node features: `[MLP(position), MLP(scan feature)]`.
pub fn node_features(ctx: &mut Ctx, cfg: &ModelConfig, net: &str, pos: Var, feat: Var) -> Result<Var> {
    let a = ctx.mlp(&format!("{}.pos", net), pos, cfg.dropout)?;
    let b = ctx.mlp(&format!("{}.feat", net), feat, cfg.dropout)?;
    Ok(ctx.tape.concat_cols(&[a, b])?)
}

/// MLP over row concatenations `[h[idx_0[r]], h[idx_1[r]], ...]`. The first
/// layer is applied per part before gathering.
fn gathered_mlp(ctx: &mut Ctx, prefix: &str, h: Var, idx: &[Arc<Vec<usize>>], dropout: f64) -> Result<Var> {
    const SUFFIX: [&str; 3] = ["a", "b", "c"];
    let mut parts = Vec::with_capacity(idx.len());
    for (k, rows) in idx.iter().enumerate() {
        let w = ctx.param(&format!("{}.l1{}.w", prefix, SUFFIX[k]))?;
        parts.push((ctx.tape.matmul(h, w)?, rows.clone()));
    }
    let b = ctx.param(&format!("{}.l1.b", prefix))?;
    let z = ctx.tape.gather_sum(&parts, Some(b))?;
    let z = ctx.tape.elu(z);
    let z = ctx.dropout(prefix, z, dropout)?;
    ctx.mlp_tail(prefix, z)
}

/// Vertex/edge message passing on the fully connected ordered-pair graph.
/// Returns 2-class logits per unordered pair (`index.unordered` order),
/// averaged over both orientations.
pub fn edge_logits(ctx: &mut Ctx, cfg: &ModelConfig, h0: Var, index: &PairIndex) -> Result<Var> {
    let ends = [index.first.clone(), index.second.clone()];
    let mut e = gathered_mlp(ctx, "edge.fe0", h0, &ends, cfg.dropout)?;
    for r in 1..=cfg.edge_rounds {
        let s = ctx.tape.segment_sum(e, index.incident.clone())?;
        let h = ctx.mlp(&format!("edge.fv{}", r), s, cfg.dropout)?;
        e = gathered_mlp(ctx, &format!("edge.fe{}", r), h, &ends, cfg.dropout)?;
    }
    let logits = ctx.linear("edge.cls", e)?;
    let both = ctx.tape.gather_sum(&[(logits, index.row_ij.clone()), (logits, index.row_ji.clone())], None)?;
    Ok(ctx.tape.scale(both, 0.5))
}

/// Network input row for one candidate face: the descriptor with the
/// circumradius compressed by `ln(1 + r)`.
pub fn face_input_row(f: &FaceFeatures) -> [f64; FACE_INPUT_DIM] {
    let mut row = f.to_array();
    row[7] = row[7].ln_1p();
    row
}

/// Inputs of the face network for a batch of dual graphs.
#[derive(Debug, Clone)]
pub struct FaceInput {
    /// `[T, 8]` descriptor rows.
    pub features: Tensor,
    /// Coarse-grid row at each centroid (used when the config enables it).
    pub f2_rows: Vec<usize>,
    pub index: DualIndex,
}

/// Face network over dual graphs; `[T, 2]` logits per candidate face.
pub fn face_logits(ctx: &mut Ctx, cfg: &ModelConfig, f2: Var, input: &FaceInput) -> Result<Var> {
    let t = input.index.nodes();
    if t == 0 {
        return Ok(ctx.tape.constant(Tensor::zeros(vec![0, 2])));
    }
    let mut x = ctx.tape.constant(input.features.clone());
    if cfg.face_use_f2 {
        let g = lookup_f2(ctx, f2, input.f2_rows.clone())?;
        x = ctx.tape.concat_cols(&[x, g])?;
    }
    let mut h = ctx.mlp("face.init", x, cfg.dropout)?;
    let ends = [input.index.src.clone(), input.index.dst.clone()];
    for r in 1..=cfg.face_rounds {
        let m = gathered_mlp(ctx, &format!("face.fe{}", r), h, &ends, cfg.dropout)?;
        let s = ctx.tape.segment_sum(m, input.index.incoming.clone())?;
        let hs = ctx.tape.concat_cols(&[h, s])?;
        h = ctx.mlp(&format!("face.fv{}", r), hs, cfg.dropout)?;
    }
    ctx.linear("face.cls", h)
}

/// Inputs of the direct triple classifier.
#[derive(Debug, Clone)]
pub struct DirectInput {
    pub index: TripleIndex,
}

/// Direct classifier over all vertex triples; `[U, 2]` logits per unordered
/// triple (`index.unordered` order), averaged over its six orderings.
pub fn direct_face_logits(ctx: &mut Ctx, cfg: &ModelConfig, h0: Var, input: &DirectInput) -> Result<Var> {
    let index = &input.index;
    let mut t = gathered_mlp(ctx, "direct.gf0", h0, &index.parts, cfg.dropout)?;
    for r in 1..=cfg.edge_rounds {
        let s = ctx.tape.segment_sum(t, index.incident.clone())?;
        let h = ctx.mlp(&format!("direct.gv{}", r), s, cfg.dropout)?;
        t = gathered_mlp(ctx, &format!("direct.gf{}", r), h, &index.parts, cfg.dropout)?;
    }
    let logits = ctx.linear("direct.cls", t)?;
    let six = ctx.tape.segment_sum(logits, index.orderings.clone())?;
    Ok(ctx.tape.scale(six, 1.0 / 6.0))
}

/// Probability of class 1 for each row of `[N, 2]` logits.
pub fn positive_probs(logits: &Tensor) -> Vec<f64> {
    logits.data().chunks_exact(2).map(|r| 1.0 / (1.0 + (r[0] - r[1]).exp())).collect()
}
