use super::networks::{face_input_row, positive_probs};
use super::{
    direct_face_logits, edge_logits, encode, lookup_f2, lookup_f2_rows, node_features, predict_vertices, volume_batch,
    Ctx, DirectInput, DualIndex, FaceInput, Model, ModelError, PairIndex, Result, TripleIndex, FACE_INPUT_DIM,
};
use crate::autodiff::{Tensor, Var};
use crate::mesh::{build_dual_graph, dual_size, DualGraph, IndexedFaceSet, Vec3, VertexEdgeGraph, DEFAULT_EDGE_THRESHOLD};
use crate::virtual_scan::{GridTransform, TsdfVolume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    pub edge_threshold: f64,
    pub face_threshold: f64,
    /// Classify vertex triples directly instead of running the face network
    /// on the dual graph.
    pub direct_faces: bool,
    /// Largest dual graph (directed dual edges) the face network is run on.
    pub max_dual_edges: usize,
}

/// Default cap on directed dual edges per graph.
pub const MAX_DUAL_EDGES: usize = 200_000;

impl Default for PredictOptions {
    fn default() -> Self {
        Self { edge_threshold: DEFAULT_EDGE_THRESHOLD, face_threshold: 0.5, direct_faces: false, max_dual_edges: MAX_DUAL_EDGES }
    }
}

/// Full inference result for one volume.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub graph: VertexEdgeGraph,
    pub dual: DualGraph,
    /// Probability per dual node (or per triple in `dual` for direct mode).
    pub face_prob: Vec<f64>,
    pub mesh: IndexedFaceSet,
}

/// Batched face-network input for `duals`, one transform per dual.
pub fn face_input(duals: &[&DualGraph], transforms: &[GridTransform], resolution: usize) -> FaceInput {
    let index = DualIndex::new(duals);
    let mut features = Vec::with_capacity(index.nodes() * FACE_INPUT_DIM);
    let mut f2_rows = Vec::with_capacity(index.nodes());
    for (b, d) in duals.iter().enumerate() {
        for f in &d.features {
            features.extend_from_slice(&face_input_row(f));
        }
        let centroids: Vec<Vec3> = d.features.iter().map(|f| f.centroid).collect();
        f2_rows.extend(lookup_f2_rows(&centroids, &transforms[b], resolution, b));
    }
    let features = Tensor::new(vec![index.nodes(), FACE_INPUT_DIM], features).expect("row width");
    FaceInput { features, f2_rows, index }
}

/// `[B·n, 3]` positions from a flat buffer.
pub fn positions_tensor(positions: &[Vec3]) -> Tensor {
    Tensor::new(vec![positions.len(), 3], positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).expect("row width")
}

pub fn positions_from(t: &Tensor) -> Vec<Vec3> {
    t.data().chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// Symmetric `n×n` matrix from per-unordered-pair probabilities of one sample.
pub(crate) fn pair_matrix(n: usize, index: &PairIndex, sample: usize, probs: &[f64]) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let range = index.unordered_offsets[sample]..index.unordered_offsets[sample + 1];
    for u in range {
        let (_, i, j) = index.unordered[u];
        m[i * n + j] = probs[u];
        m[j * n + i] = probs[u];
    }
    m
}

impl Model {
    fn encode_one<'s>(&'s self, vol: &TsdfVolume) -> Result<(Ctx<'s>, Var, Var)> {
        let mut ctx = Ctx::eval(&self.params);
        let input = ctx.tape.constant(volume_batch(&[vol])?);
        let enc = encode(&mut ctx, &self.config, input)?;
        Ok((ctx, enc.f2, enc.f))
    }

    fn edge_probs_in(&self, ctx: &mut Ctx, f2: Var, vol: &TsdfVolume, positions: &[Vec3]) -> Result<Vec<f64>> {
        let n = positions.len();
        let pos = ctx.tape.constant(positions_tensor(positions));
        let feat = lookup_f2(ctx, f2, lookup_f2_rows(positions, &vol.transform, vol.resolution, 0))?;
        let h0 = node_features(ctx, &self.config, "edge", pos, feat)?;
        let index = PairIndex::new(&[n]);
        let logits = edge_logits(ctx, &self.config, h0, &index)?;
        let probs = positive_probs(ctx.tape.value(logits));
        Ok(pair_matrix(n, &index, 0, &probs))
    }

    fn face_probs_in(&self, ctx: &mut Ctx, f2: Var, vol: &TsdfVolume, dual: &DualGraph) -> Result<Vec<f64>> {
        let input = face_input(&[dual], &[vol.transform], vol.resolution);
        let logits = super::face_logits(ctx, &self.config, f2, &input)?;
        Ok(positive_probs(ctx.tape.value(logits)))
    }

    fn direct_probs_in(&self, ctx: &mut Ctx, f2: Var, vol: &TsdfVolume, positions: &[Vec3]) -> Result<(DualGraph, Vec<f64>)> {
        let n = positions.len();
        if n > self.config.direct_max_vertices {
            return Err(ModelError::TooManyVertices { n, max: self.config.direct_max_vertices });
        }
        let pos = ctx.tape.constant(positions_tensor(positions));
        let feat = lookup_f2(ctx, f2, lookup_f2_rows(positions, &vol.transform, vol.resolution, 0))?;
        let h0 = node_features(ctx, &self.config, "direct", pos, feat)?;
        let input = DirectInput { index: TripleIndex::new(&[n]) };
        let logits = direct_face_logits(ctx, &self.config, h0, &input)?;
        let probs = positive_probs(ctx.tape.value(logits));
        Ok(triples_as_dual(positions, input.index.unordered.iter().map(|u| u.1).collect(), probs))
    }

    /// Eval-mode vertex positions for one volume.
    pub fn vertices(&self, vol: &TsdfVolume) -> Result<Vec<Vec3>> {
        let (mut ctx, _, f) = self.encode_one(vol)?;
        let v = predict_vertices(&mut ctx, &self.config, f)?;
        Ok(positions_from(ctx.tape.value(v)))
    }

    /// Edge probabilities (`n×n`, symmetric, zero diagonal) for given vertex
    /// positions, conditioned on `vol`.
    pub fn edge_probabilities(&self, vol: &TsdfVolume, positions: &[Vec3]) -> Result<Vec<f64>> {
        let (mut ctx, f2, _) = self.encode_one(vol)?;
        self.edge_probs_in(&mut ctx, f2, vol, positions)
    }

    /// Vertex positions and their edge probabilities from one encoder pass.
    pub fn vertex_edge(&self, vol: &TsdfVolume) -> Result<(Vec<Vec3>, Vec<f64>)> {
        let (mut ctx, f2, f) = self.encode_one(vol)?;
        let v = predict_vertices(&mut ctx, &self.config, f)?;
        let positions = positions_from(ctx.tape.value(v));
        let probs = self.edge_probs_in(&mut ctx, f2, vol, &positions)?;
        Ok((positions, probs))
    }

    /// Face-network probability for every node of `dual`.
    pub fn face_probabilities(&self, vol: &TsdfVolume, dual: &DualGraph) -> Result<Vec<f64>> {
        let (mut ctx, f2, _) = self.encode_one(vol)?;
        self.face_probs_in(&mut ctx, f2, vol, dual)
    }

    /// Direct-classifier probability for every vertex triple. The returned
    /// graph lists the triples (no adjacency) and `face_prob` in its
    /// `features` order; see [`triples_as_dual`].
    pub fn direct_probabilities(&self, vol: &TsdfVolume, positions: &[Vec3]) -> Result<(DualGraph, Vec<f64>)> {
        let (mut ctx, f2, _) = self.encode_one(vol)?;
        self.direct_probs_in(&mut ctx, f2, vol, positions)
    }

    /// Scan to mesh: vertices, thresholded edges, candidate faces, kept faces.
    pub fn predict(&self, vol: &TsdfVolume, opts: &PredictOptions) -> Result<Prediction> {
        let (mut ctx, f2, f) = self.encode_one(vol)?;
        let v = predict_vertices(&mut ctx, &self.config, f)?;
        let positions = positions_from(ctx.tape.value(v));
        let probs = self.edge_probs_in(&mut ctx, f2, vol, &positions)?;
        let graph = VertexEdgeGraph::from_probabilities(positions.clone(), probs, opts.edge_threshold);
        let (dual, face_prob) = if opts.direct_faces {
            self.direct_probs_in(&mut ctx, f2, vol, &positions)?
        } else {
            check_dual_size(&graph, opts.max_dual_edges)?;
            let dual = build_dual_graph(&graph);
            let p = self.face_probs_in(&mut ctx, f2, vol, &dual)?;
            (dual, p)
        };
        let keep: Vec<bool> = face_prob.iter().map(|&p| p > opts.face_threshold).collect();
        let mesh = dual.to_mesh(&positions, &keep);
        Ok(Prediction { graph, dual, face_prob, mesh })
    }
}

/// Errors when the dual graph of `graph` would exceed `max` directed edges.
pub fn check_dual_size(graph: &VertexEdgeGraph, max: usize) -> Result<()> {
    let (triangles, dual_edges) = dual_size(graph);
    if dual_edges > max {
        return Err(ModelError::DualTooLarge { triangles, dual_edges, max });
    }
    Ok(())
}

/// Wraps a list of vertex triples as an adjacency-free dual graph so direct
/// predictions share the dual-graph mesh assembly.
pub fn triples_as_dual(positions: &[Vec3], triangles: Vec<[usize; 3]>, probs: Vec<f64>) -> (DualGraph, Vec<f64>) {
    let features = triangles
        .iter()
        .map(|&t| {
            let [a, b, c] = crate::mesh::position_ordered(positions, t);
            crate::mesh::face_features([positions[a], positions[b], positions[c]])
        })
        .collect();
    let adjacency = vec![Vec::new(); triangles.len()];
    (DualGraph { triangles, features, adjacency }, probs)
}
