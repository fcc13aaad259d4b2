//! Three-stage training schedule, datasets, checkpoints and the scaling
//! benchmark.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, DEFAULT_LR};
use crate::losses::{ClassWeighting, LossError, Matcher, TRAIN_CHAMFER_SAMPLES};
use crate::mesh::MeshError;
use crate::model::{ModelConfig, ModelError};
use crate::virtual_scan::ScanError;

pub mod alloc;
mod bench;
mod dataset;
mod labels;
mod run;

pub use bench::{bench_scaling, bench_table_csv, BenchOptions, BenchRow};
pub use dataset::{
    generate_dataset, load_shape_dir, DatasetIndex, GenOptions, GenSummary, IndexEntry, Sample, Split, DEFAULT_TRAJECTORIES,
};
pub use labels::{direct_gt_labels, direct_surface_labels, point_mesh_distance};
pub use run::{
    check_stage_order, stage_checkpoint, stage_of, StageOutcome, StepRecord, Trainer, META_STAGE, META_TRAIN_CONFIG,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("stage {stage} needs a checkpoint from stage {needs}, got {found}")]
    StageOrder { stage: Stage, needs: Stage, found: String },
    #[error("non-finite loss at {stage} step {step} (samples {samples:?}); largest gradient norms: {grad_norms:?}")]
    NonFinite { stage: Stage, step: usize, samples: Vec<String>, grad_norms: Vec<(String, f64)> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    VertexEdge,
    FaceCe,
    FaceChamfer,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::VertexEdge, Stage::FaceCe, Stage::FaceChamfer];

    pub fn name(self) -> &'static str {
        match self {
            Stage::VertexEdge => "vertex_edge",
            Stage::FaceCe => "face_ce",
            Stage::FaceChamfer => "face_chamfer",
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Stage::VertexEdge => 5,
            Stage::FaceCe | Stage::FaceChamfer => 1,
        }
    }

    /// Stage whose checkpoint this one starts from.
    pub fn previous(self) -> Option<Stage> {
        match self {
            Stage::VertexEdge => None,
            Stage::FaceCe => Some(Stage::VertexEdge),
            Stage::FaceChamfer => Some(Stage::FaceCe),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown stage {:?} (vertex_edge, face_ce, face_chamfer)", s)))
    }
}

/// How faces are predicted and supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceMode {
    /// Face network on the dual graph of the predicted edges.
    #[default]
    Dual,
    /// Direct triple classifier; positives are matched ground-truth faces.
    DirectGt,
    /// Direct triple classifier; positives are triples lying near the
    /// target surface.
    DirectSurface,
}

impl FaceMode {
    pub fn is_direct(self) -> bool {
        !matches!(self, FaceMode::Dual)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Anneals the learning rate from `lr` to this value over the stage
    /// along a half cosine; constant when unset.
    pub lr_final: Option<f64>,
    pub batch_size: usize,
    pub stage: Stage,
    /// Epochs of the stage; `None` uses the stage default.
    pub epochs: Option<usize>,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub dataset: PathBuf,
    pub model: ModelConfig,
    pub lambda_edge: f64,
    pub matcher: Matcher,
    pub edge_weighting: ClassWeighting,
    pub face_mode: FaceMode,
    /// Distance in voxels under which a triple counts as on the surface.
    pub surface_voxels: f64,
    /// Let the chamfer stage update the encoder and vertex/edge heads too.
    pub unfreeze: bool,
    pub chamfer_samples: usize,
    /// Validate every this many steps; 0 validates once per epoch.
    pub val_every: usize,
    pub edge_threshold: f64,
    /// Feed the edge network constant copies of the predicted positions,
    /// so the edge loss does not move the vertices.
    pub detach_edge_positions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            lr_final: None,
            batch_size: 8,
            stage: Stage::VertexEdge,
            epochs: None,
            max_steps: None,
            seed: 0,
            dataset: PathBuf::from("data/index.csv"),
            model: ModelConfig::default(),
            lambda_edge: 1.0,
            matcher: Matcher::Hungarian,
            edge_weighting: ClassWeighting::default(),
            face_mode: FaceMode::Dual,
            surface_voxels: 1.5,
            unfreeze: false,
            chamfer_samples: TRAIN_CHAMFER_SAMPLES,
            val_every: 0,
            edge_threshold: crate::mesh::DEFAULT_EDGE_THRESHOLD,
            detach_edge_positions: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.lr_final.is_some_and(|f| !(f >= 0.0 && f <= self.lr)) {
            return bad("lr_final must lie in [0, lr]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.chamfer_samples == 0 {
            return bad("chamfer_samples must be at least 1");
        }
        if self.face_mode.is_direct() && self.model.n_vertices > self.model.direct_max_vertices {
            return Err(TrainError::Config(format!(
                "direct face mode supports at most {} vertices, config has {}",
                self.model.direct_max_vertices, self.model.n_vertices
            )));
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or_else(|| self.stage.default_epochs())
    }

    /// Learning rate for optimizer step `step` (0-based) of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_final {
            Some(f) if total > 1 => {
                let t = step as f64 / (total - 1) as f64;
                f + 0.5 * (self.lr - f) * (1.0 + (std::f64::consts::PI * t).cos())
            }
            _ => self.lr,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.message().to_string()))
    }

    /// Top-level keys (with `model.` prefixes) whose values differ.
    pub fn differing_keys(&self, other: &Self) -> Vec<String> {
        let a = toml::Table::try_from(self).expect("config serializes");
        let b = toml::Table::try_from(other).expect("config serializes");
        let mut keys: Vec<String> = Vec::new();
        for k in a.keys().chain(b.keys()) {
            if k == "model" || keys.contains(k) {
                continue;
            }
            if a.get(k) != b.get(k) {
                keys.push(k.clone());
            }
        }
        keys.extend(self.model.differing_keys(&other.model).into_iter().map(|k| format!("model.{}", k)));
        keys.sort();
        keys
    }
}
