//! Networks: the volumetric encoder, the vertex head, the vertex/edge graph
//! network, the dual-graph face network and the direct triple classifier.
//!
//! Weights live in a [`ParamStore`] under dotted names (`enc.c1.w`,
//! `edge.fe0.l1a.w`, ...). Each forward pass binds them onto a fresh tape
//! through a [`Ctx`].

mod ctx;
mod encoder;
mod index;
mod init;
mod networks;
mod predict;

pub use ctx::{apply_bn_updates, BnUpdate, Ctx, BN_EPS, BN_MOMENTUM};
pub use encoder::{encode, volume_batch, EncoderOut};
pub use index::{DualIndex, PairIndex, TripleIndex};
pub use networks::{
    direct_face_logits, edge_logits, face_input_row, face_logits, lookup_f2, lookup_f2_rows, node_features,
    positive_probs, predict_vertices, DirectInput, FaceInput,
};
pub(crate) use predict::pair_matrix;
pub use predict::{
    check_dual_size, face_input, positions_from, positions_tensor, triples_as_dual, Prediction, PredictOptions, MAX_DUAL_EDGES,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Checkpoint, ParamStore};
use crate::mesh::FACE_FEATURE_DIM;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected a {expected}-channel volume of resolution {resolution}, got {got}")]
    Input { expected: usize, resolution: usize, got: String },
    #[error("direct face prediction supports at most {max} vertices, got {n}")]
    TooManyVertices { n: usize, max: usize },
    #[error("dual graph too large: {triangles} candidate faces with {dual_edges} directed dual edges (limit {max})")]
    DualTooLarge { triangles: usize, dual_edges: usize, max: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Architecture hyperparameters. Serialized as TOML; every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Vertices predicted per shape.
    pub n_vertices: usize,
    /// Output channels of the four encoder blocks.
    pub encoder_channels: [usize; 4],
    /// Hidden width of the vertex head.
    pub vertex_hidden: usize,
    pub node_hidden: usize,
    pub edge_hidden: usize,
    pub face_hidden: usize,
    /// Message-passing rounds of the vertex/edge network.
    pub edge_rounds: usize,
    /// Message-passing rounds of the face network.
    pub face_rounds: usize,
    pub dropout: f64,
    /// Append the coarse scan feature at each face centroid to the face
    /// descriptor.
    pub face_use_f2: bool,
    /// Size guard for the direct triple classifier.
    pub direct_max_vertices: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_vertices: 100,
            encoder_channels: [8, 16, 32, 32],
            vertex_hidden: 256,
            node_hidden: 64,
            edge_hidden: 64,
            face_hidden: 64,
            edge_rounds: 3,
            face_rounds: 3,
            dropout: 0.5,
            face_use_f2: true,
            direct_max_vertices: 40,
        }
    }
}

/// Input grid resolution the encoder is built for.
pub const INPUT_RESOLUTION: usize = 32;
/// Side of the coarse feature grid.
pub const F2_SIDE: usize = 8;
/// Width of a face-network input row.
pub const FACE_INPUT_DIM: usize = FACE_FEATURE_DIM;
/// Side of the last encoder feature grid before flattening.
pub const LATENT_SIDE: usize = 2;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_vertices < 3 {
            return bad("n_vertices must be at least 3");
        }
        if self.encoder_channels.contains(&0) || self.vertex_hidden == 0 || self.edge_hidden == 0 || self.face_hidden == 0 {
            return bad("layer widths must be positive");
        }
        if self.node_hidden < 2 || self.node_hidden % 2 != 0 {
            return bad("node_hidden must be even and at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Size of the flat latent code.
    pub fn latent_dim(&self) -> usize {
        self.encoder_channels[3] * LATENT_SIDE.pow(3)
    }

    /// Channels of the coarse feature grid.
    pub fn f2_channels(&self) -> usize {
        self.encoder_channels[1]
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Names of keys whose values differ between two configs.
    pub fn differing_keys(&self, other: &Self) -> Vec<String> {
        let a = toml::Table::try_from(self).expect("config serializes");
        let b = toml::Table::try_from(other).expect("config serializes");
        a.keys().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
    }
}

/// Checkpoint metadata key holding the model config.
pub const META_MODEL_CONFIG: &str = "model_config";

/// A configured set of weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh weights, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init::init_params(&config, seed);
        Ok(Self { config, params })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone());
        ck.meta.insert(META_MODEL_CONFIG.into(), self.config.to_toml());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let text = ck
            .meta
            .get(META_MODEL_CONFIG)
            .ok_or_else(|| ModelError::Config("checkpoint has no model config".into()))?;
        let config = ModelConfig::from_toml(text)?;
        let reference = init::init_params(&config, 0);
        for (name, p) in reference.iter() {
            let got = ck.params.get(name).ok_or_else(|| ModelError::Config(format!("checkpoint lacks {}", name)))?;
            if got.value.shape() != p.value.shape() {
                return Err(ModelError::Config(format!(
                    "{}: shape {:?} in checkpoint, {:?} expected",
                    name,
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, params: ck.params.clone() })
    }
}
