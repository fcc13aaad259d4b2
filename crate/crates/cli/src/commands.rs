use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use facetnet::autodiff::{AutodiffError, Checkpoint};
use facetnet::mesh::shapes::{builtin_corpus, BUILTIN_CLASSES};
use facetnet::mesh::{read_obj, write_obj, IndexedFaceSet, MeshError};
use facetnet::metrics::EvalReport;
use facetnet::model::{Model, ModelError, PredictOptions};
use facetnet::trainer::{
    bench_scaling, bench_table_csv, check_stage_order, generate_dataset, load_shape_dir, stage_checkpoint, stage_of,
    BenchOptions, DatasetIndex, FaceMode, GenOptions, Split, Stage, TrainConfig, TrainError, Trainer, META_TRAIN_CONFIG,
};
use facetnet::virtual_scan::{ScanError, TsdfVolume};
use serde_json::json;

use crate::manifest::{manifest_beside, RunManifest};
use crate::{CliError, Outcome};

type Result<T> = std::result::Result<T, CliError>;

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::StageOrder { .. } => CliError::Usage(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::TooManyVertices { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ScanError> for CliError {
    fn from(e: ScanError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AutodiffError> for CliError {
    fn from(e: AutodiffError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {}", path.display(), e))
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// `builtin` for the procedural corpus, or a directory of OBJ files.
    #[arg(long, default_value = "builtin")]
    pub shapes: String,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// Depth images fused per scan.
    #[arg(long, default_value_t = 1)]
    pub views: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Shapes drawn from the builtin corpus.
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    /// Scans per shape from distinct camera placements.
    #[arg(long, default_value_t = 2)]
    pub trajectories: usize,
    #[arg(long, default_value_t = 100)]
    pub target_vertices: usize,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

pub fn gen_data(a: GenDataArgs) -> Result<Outcome> {
    let (shapes, mut skipped, inputs) = if a.shapes == "builtin" {
        (builtin_corpus(a.count, &BUILTIN_CLASSES, a.seed), Vec::new(), Vec::new())
    } else {
        let dir = PathBuf::from(&a.shapes);
        if !dir.is_dir() {
            return Err(CliError::Data(format!("shape directory {} not found", dir.display())));
        }
        let (shapes, skipped) = load_shape_dir(&dir)?;
        let inputs = obj_files(&dir)?;
        (shapes, skipped, inputs)
    };
    if shapes.is_empty() {
        return Err(CliError::Data("no readable shapes".into()));
    }
    let opts = GenOptions {
        views: a.views,
        trajectories: a.trajectories,
        seed: a.seed,
        target_vertices: a.target_vertices,
        val_fraction: a.val_fraction,
        test_fraction: a.test_fraction,
    };
    let summary = generate_dataset(&shapes, &opts, &a.out)?;
    skipped.extend(summary.skipped.iter().cloned());
    for (name, why) in &skipped {
        eprintln!("warning: skipped {}: {}", name, why);
    }
    let config = json!({
        "shapes": a.shapes, "views": a.views, "count": a.count, "trajectories": a.trajectories,
        "target_vertices": a.target_vertices, "val_fraction": a.val_fraction, "test_fraction": a.test_fraction,
        "skipped": skipped.len(),
    });
    let mut m = RunManifest::new("gen-data", config, a.seed).with_inputs(inputs)?;
    m.outputs = summary.files.iter().map(|f| a.out.join(f)).collect();
    m.outputs.push(summary.index_path.clone());
    m.warnings = skipped.iter().map(|(n, w)| format!("skipped {}: {}", n, w)).collect();
    m.write(&a.out.join("manifest.json"))?;
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| summary.index.split(s).count());
    println!(
        "{} scans of {} shapes (train {}, val {}, test {}) in {}",
        summary.index.entries.len(),
        shapes.len() - summary.skipped.len(),
        counts[0],
        counts[1],
        counts[2],
        a.out.display()
    );
    Ok(Outcome::Done)
}

fn obj_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_at(dir))? {
        let p = entry?.path();
        if p.is_dir() {
            for inner in fs::read_dir(&p)? {
                let q = inner?.path();
                if is_obj(&q) {
                    out.push(q);
                }
            }
        } else if is_obj(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn is_obj(p: &Path) -> bool {
    p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj"))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// vertex_edge, face_ce or face_chamfer; overrides the config file.
    #[arg(long)]
    pub stage: Option<String>,
    /// TOML training config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint of the previous stage (or of this stage, to continue).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Dataset index; overrides the config file.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for the checkpoint, log and manifest.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

/// Effective config: file (or the resumed checkpoint's own config), then
/// command-line overrides.
fn train_config(a: &TrainArgs, ck: Option<&Checkpoint>) -> Result<TrainConfig> {
    let mut cfg = match (&a.config, ck.and_then(|c| c.meta.get(META_TRAIN_CONFIG))) {
        (Some(path), _) => TrainConfig::from_toml(&fs::read_to_string(path).map_err(io_at(path))?)?,
        (None, Some(text)) => TrainConfig::from_toml(text)?,
        (None, None) => TrainConfig::default(),
    };
    if let Some(s) = &a.stage {
        cfg.stage = s.parse()?;
    } else if a.config.is_none() {
        if let Some(prev) = ck.and_then(stage_of) {
            cfg.stage = Stage::ALL.into_iter().find(|s| s.previous() == Some(prev)).unwrap_or(prev);
        }
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(d) = &a.dataset {
        cfg.dataset = d.clone();
    }
    if a.epochs.is_some() {
        cfg.epochs = a.epochs;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> Result<Outcome> {
    let ck = match &a.resume {
        Some(p) => Some(Checkpoint::load(p).map_err(|e| CliError::Data(format!("{}: {}", p.display(), e)))?),
        None => None,
    };
    let cfg = train_config(&a, ck.as_ref())?;
    check_stage_order(cfg.stage, ck.as_ref())?;
    let model = match &ck {
        Some(ck) => {
            let model = Model::from_checkpoint(ck)?;
            let diff = model.config.differing_keys(&cfg.model);
            if !diff.is_empty() {
                let keys: Vec<String> = diff.iter().map(|k| format!("model.{}", k)).collect();
                return Err(CliError::Usage(format!(
                    "checkpoint {} was trained with a different model config; differing keys: {}",
                    a.resume.as_ref().unwrap().display(),
                    keys.join(", ")
                )));
            }
            model
        }
        None => Model::new(cfg.model.clone(), cfg.seed)?,
    };

    let index = DatasetIndex::load(&cfg.dataset)?;
    let train = index.load_samples(Split::Train, cfg.chamfer_samples)?;
    let val = index.load_samples(Split::Val, cfg.chamfer_samples)?;
    fs::create_dir_all(&a.out).map_err(io_at(&a.out))?;
    let log_path = a.out.join(format!("{}_log.jsonl", cfg.stage));
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).map_err(io_at(&log_path))?);
    let mut trainer = Trainer::new(cfg.clone(), model, train, val)?;
    let mut log_err = None;
    let outcome = trainer.run(&mut |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        if let Err(e) = writeln!(log, "{}", line) {
            log_err.get_or_insert(e);
        }
        if let Some(v) = rec.val {
            eprintln!("{} step {} loss {:.5} val {:.5}", rec.stage, rec.step, rec.loss, v);
        }
    })?;
    log.flush()?;
    if let Some(e) = log_err {
        return Err(e.into());
    }

    let ck_path = a.out.join(format!("{}.ckpt", cfg.stage));
    stage_checkpoint(outcome.best_model(), cfg.stage, &cfg).save(&ck_path)?;
    let mut inputs: Vec<PathBuf> = vec![cfg.dataset.clone()];
    inputs.extend(a.resume.iter().cloned());
    inputs.extend(a.config.iter().cloned());
    let config = toml_to_json(&cfg.to_toml())?;
    let mut m = RunManifest::new("train", config, cfg.seed).with_inputs(inputs)?;
    m.outputs = vec![ck_path.clone(), log_path];
    if outcome.skipped_empty > 0 {
        m.warnings.push(format!("{} samples had no usable candidate faces", outcome.skipped_empty));
    }
    m.write(&a.out.join(format!("{}.manifest.json", cfg.stage)))?;
    let best = outcome.best.as_ref().map(|b| format!("{:.5}", b.0)).unwrap_or_else(|| "n/a".into());
    println!("{} finished after {} steps, best val {}, checkpoint {}", cfg.stage, outcome.steps, best, ck_path.display());
    Ok(Outcome::Done)
}

fn toml_to_json(text: &str) -> Result<serde_json::Value> {
    let v: toml::Value = toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
    serde_json::to_value(v).map_err(|e| CliError::Usage(e.to_string()))
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub tsdf: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub edge_thresh: f64,
    #[arg(long, default_value_t = 0.5)]
    pub face_thresh: f64,
    /// Accept a checkpoint whose faces were trained with cross entropy only.
    #[arg(long)]
    pub ce_faces: bool,
}

pub fn infer(a: InferArgs) -> Result<Outcome> {
    for (name, t) in [("edge", a.edge_thresh), ("face", a.face_thresh)] {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::Usage(format!("{} threshold must lie in [0, 1], got {}", name, t)));
        }
    }
    let ck = Checkpoint::load(&a.ckpt).map_err(|e| CliError::Data(format!("{}: {}", a.ckpt.display(), e)))?;
    match stage_of(&ck) {
        Some(Stage::FaceChamfer) => {}
        Some(Stage::FaceCe) if a.ce_faces => {}
        Some(Stage::FaceCe) => {
            return Err(CliError::Usage("checkpoint stops after face_ce; pass --ce-faces to use it".into()));
        }
        _ => return Err(CliError::Usage("checkpoint has no trained face network".into())),
    }
    let direct = match ck.meta.get(META_TRAIN_CONFIG) {
        Some(text) => TrainConfig::from_toml(text)?.face_mode != FaceMode::Dual,
        None => false,
    };
    let model = Model::from_checkpoint(&ck)?;
    let vol = TsdfVolume::load(&a.tsdf).map_err(|e| CliError::Data(format!("{}: {}", a.tsdf.display(), e)))?;
    let opts = PredictOptions {
        edge_threshold: a.edge_thresh,
        face_threshold: a.face_thresh,
        direct_faces: direct,
        ..Default::default()
    };
    let mut warning = None;
    let mesh = match model.predict(&vol, &opts) {
        Ok(p) => p.mesh,
        Err(ModelError::DualTooLarge { triangles, .. }) => {
            warning = Some(format!("{} candidate faces exceed the face network limit", triangles));
            IndexedFaceSet { vertices: model.vertices(&vol)?, faces: Vec::new() }
        }
        Err(e) => return Err(e.into()),
    };
    if mesh.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
        return Err(CliError::Numeric("predicted vertices are not finite".into()));
    }
    if mesh.faces.is_empty() && warning.is_none() {
        warning = Some("no face passed the threshold; wrote vertices only".into());
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    write_obj(&a.out, &mesh)?;
    let config = json!({
        "edge_thresh": a.edge_thresh, "face_thresh": a.face_thresh, "direct_faces": direct,
        "ckpt_stage": stage_of(&ck).map(|s| s.name()),
    });
    let mut m = RunManifest::new("infer", config, 0).with_inputs(vec![a.ckpt.clone(), a.tsdf.clone()])?;
    m.outputs = vec![a.out.clone()];
    m.warnings.extend(warning.iter().cloned());
    m.write(&manifest_beside(&a.out))?;
    println!("{} vertices, {} faces -> {}", mesh.vertex_count(), mesh.face_count(), a.out.display());
    Ok(match warning {
        Some(w) => Outcome::Warning(w),
        None => Outcome::Done,
    })
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted OBJ files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth OBJ files, optionally in class subdirectories.
    #[arg(long)]
    pub gt: PathBuf,
    /// Per-mesh CSV; the per-class summary goes to `<stem>_summary.csv`.
    #[arg(long, default_value = "eval.csv")]
    pub out: PathBuf,
    #[arg(long, default_value_t = facetnet::metrics::EVAL_SAMPLES)]
    pub samples: usize,
}

/// OBJ files by stem with their class: the subdirectory name, or the stem
/// up to its first `_` for top-level files.
fn meshes_by_stem(dir: &Path) -> Result<BTreeMap<String, (PathBuf, String)>> {
    let mut out = BTreeMap::new();
    for p in obj_files(dir)? {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let parent = p.parent().unwrap_or(dir);
        let class = if parent != dir {
            parent.file_name().map(|c| c.to_string_lossy().into_owned()).unwrap_or_default()
        } else {
            stem.split('_').next().unwrap_or(&stem).to_string()
        };
        out.insert(stem, (p, class));
    }
    Ok(out)
}

/// Ground-truth stem for a prediction: exact, or with a `_t<k>` scan suffix
/// removed.
fn gt_stem<'a>(pred: &'a str, gt: &BTreeMap<String, (PathBuf, String)>) -> Option<&'a str> {
    if gt.contains_key(pred) {
        return Some(pred);
    }
    let (base, suffix) = pred.rsplit_once("_t")?;
    (suffix.chars().all(|c| c.is_ascii_digit()) && !suffix.is_empty() && gt.contains_key(base)).then_some(base)
}

pub fn eval(a: EvalArgs) -> Result<Outcome> {
    for (name, dir) in [("prediction", &a.pred), ("ground-truth", &a.gt)] {
        if !dir.is_dir() {
            return Err(CliError::Data(format!("{} directory {} not found", name, dir.display())));
        }
    }
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let preds = meshes_by_stem(&a.pred)?;
    let gts = meshes_by_stem(&a.gt)?;
    let mut report = EvalReport::default();
    let mut unpaired = Vec::new();
    let mut used_gt = std::collections::BTreeSet::new();
    let mut inputs = Vec::new();
    for (stem, (path, _)) in &preds {
        let Some(g) = gt_stem(stem, &gts) else {
            unpaired.push(path.display().to_string());
            continue;
        };
        used_gt.insert(g.to_string());
        let (gpath, class) = &gts[g];
        let pm = read_obj(path).map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
        let gm = read_obj(gpath).map_err(|e| CliError::Data(format!("{}: {}", gpath.display(), e)))?;
        let dist = facetnet::metrics::eval_mesh_distance(&pm, &gm, a.samples);
        let nsim = facetnet::metrics::eval_normal_similarity(&pm, &gm, a.samples, facetnet::metrics::NORMAL_WINDOW);
        match (dist, nsim) {
            (Ok(dist), Ok(nsim)) => {
                report.rows.push(facetnet::metrics::EvalRow { name: stem.clone(), class: class.clone(), dist, nsim })
            }
            (Err(e), _) | (_, Err(e)) => {
                unpaired.push(format!("{} ({})", path.display(), e));
                continue;
            }
        }
        inputs.push(path.clone());
        inputs.push(gpath.clone());
    }
    unpaired.extend(gts.iter().filter(|(s, _)| !used_gt.contains(*s)).map(|(_, (p, _))| p.display().to_string()));
    for u in &unpaired {
        eprintln!("warning: excluded {}", u);
    }
    if report.rows.is_empty() {
        return Err(CliError::Data("no prediction could be paired with a ground-truth mesh".into()));
    }

    let mut rows = Vec::new();
    report.write_rows_csv(&mut rows).map_err(|e| CliError::Data(e.to_string()))?;
    let mut summary = Vec::new();
    report.write_summary_csv(&mut summary).map_err(|e| CliError::Data(e.to_string()))?;
    let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "eval".into());
    let summary_path = a.out.with_file_name(format!("{}_summary.csv", stem));
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    fs::write(&a.out, rows).map_err(io_at(&a.out))?;
    fs::write(&summary_path, summary).map_err(io_at(&summary_path))?;
    let mut m = RunManifest::new("eval", json!({ "samples": a.samples }), facetnet::metrics::EVAL_SEED).with_inputs(inputs)?;
    m.outputs = vec![a.out.clone(), summary_path];
    m.warnings = unpaired.iter().map(|u| format!("excluded {}", u)).collect();
    m.write(&manifest_beside(&a.out))?;
    print!("{}", report.summary_table());
    Ok(Outcome::Done)
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated vertex counts.
    #[arg(long, value_delimiter = ',', default_value = "100,200,300,400")]
    pub n: Vec<usize>,
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
    /// Timed training steps per vertex count.
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    #[arg(long, default_value_t = 3)]
    pub infer_runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Peak heap allowed per configuration in GiB; defaults to the
    /// available system memory.
    #[arg(long)]
    pub memory_gb: Option<f64>,
}

pub fn bench(a: BenchArgs) -> Result<Outcome> {
    if a.n.is_empty() || a.n.contains(&0) {
        return Err(CliError::Usage("--n needs positive vertex counts".into()));
    }
    let opts = BenchOptions {
        steps: a.steps,
        infer_runs: a.infer_runs,
        seed: a.seed,
        memory_budget: a.memory_gb.map(|g| (g * (1u64 << 30) as f64) as usize),
        ..Default::default()
    };
    let rows = bench_scaling(&a.n, &opts, &mut |r| {
        let t = r.train_time_s.map(|t| format!("{:.3}s", t)).unwrap_or_else(|| "OOM".into());
        eprintln!("n={} train step {}", r.n, t);
    })?;
    let table = bench_table_csv(&rows);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    fs::write(&a.out, &table).map_err(io_at(&a.out))?;
    let config = json!({ "n": a.n, "steps": a.steps, "infer_runs": a.infer_runs, "memory_gb": a.memory_gb });
    let mut m = RunManifest::new("bench", config, a.seed);
    m.outputs = vec![a.out.clone()];
    m.write(&manifest_beside(&a.out))?;
    print!("{}", table);
    Ok(Outcome::Done)
}
