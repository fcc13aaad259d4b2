use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use super::alloc;
use super::dataset::Sample;
use super::run::Trainer;
use super::{Result, Stage, TrainConfig};
use crate::losses::target_samples;
use crate::mesh::shapes::cylinder;
use crate::model::{Model, ModelConfig};
use crate::virtual_scan::scan_mesh;

const GB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub model: ModelConfig,
    /// Timed training steps per `n`, after one warm-up step.
    pub steps: usize,
    pub infer_runs: usize,
    pub seed: u64,
    /// Peak heap allowed for one configuration; `None` reads the available
    /// system memory.
    pub memory_budget: Option<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { model: ModelConfig::default(), steps: 3, infer_runs: 3, seed: 0, memory_budget: None }
    }
}

/// Timing and peak heap of one vertex count. `None` fields were not
/// measured (OOM, or no tracking allocator installed).
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub train_time_s: Option<f64>,
    pub train_memory_gb: Option<f64>,
    pub infer_time_s: Option<f64>,
    pub infer_memory_gb: Option<f64>,
    pub oom: bool,
}

fn available_memory() -> Option<usize> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = text.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: usize = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Single-sample job with `n` predicted and `n` target vertices.
fn bench_sample(n: usize, seed: u64) -> Result<Sample> {
    let mesh = cylinder((n / 2).max(3), 0.5, 1.0).normalized_unit()?;
    let volume = scan_mesh(&mesh, 1, seed)?.volume;
    let cloud = target_samples(&mesh, 256, seed)?;
    Ok(Sample { name: format!("bench_{}", n), class: "bench".into(), volume: Arc::new(volume), mesh: Arc::new(mesh), cloud })
}

/// Mean train-step time (forward, matching, backward, update) and mean
/// inference time of the vertex/edge stage for each `n`, with peak heap
/// growth when a [`alloc::TrackingAllocator`] is installed.
///
/// A configuration whose peak, extrapolated quadratically from the last
/// measured one, exceeds the memory budget is reported as OOM without
/// running it.
pub fn bench_scaling(ns: &[usize], opts: &BenchOptions, progress: &mut dyn FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    let budget = opts.memory_budget.or_else(available_memory);
    let mut last: Option<(usize, usize)> = None;
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let mut row =
            BenchRow { n, train_time_s: None, train_memory_gb: None, infer_time_s: None, infer_memory_gb: None, oom: false };
        if let (Some((n0, p0)), Some(b)) = (last, budget) {
            let estimate = p0 as f64 * (n as f64 / n0 as f64).powi(2);
            if estimate > b as f64 {
                row.oom = true;
                progress(&row);
                rows.push(row);
                continue;
            }
        }
        let model_cfg = ModelConfig { n_vertices: n, ..opts.model.clone() };
        let cfg = TrainConfig { batch_size: 1, stage: Stage::VertexEdge, seed: opts.seed, model: model_cfg.clone(), ..Default::default() };
        let sample = bench_sample(n, opts.seed)?;
        let volume = sample.volume.clone();
        let mut trainer = Trainer::new(cfg, Model::new(model_cfg, opts.seed)?, vec![sample], Vec::new())?;

        trainer.step(&[0], 0)?;
        let base = alloc::current_bytes();
        alloc::reset_peak();
        let t = Instant::now();
        for s in 0..opts.steps.max(1) {
            trainer.step(&[0], s + 1)?;
        }
        row.train_time_s = Some(t.elapsed().as_secs_f64() / opts.steps.max(1) as f64);
        let train_peak = alloc::peak_bytes().saturating_sub(base);

        trainer.model.vertex_edge(&volume)?;
        let base = alloc::current_bytes();
        alloc::reset_peak();
        let t = Instant::now();
        for _ in 0..opts.infer_runs.max(1) {
            trainer.model.vertex_edge(&volume)?;
        }
        row.infer_time_s = Some(t.elapsed().as_secs_f64() / opts.infer_runs.max(1) as f64);
        let infer_peak = alloc::peak_bytes().saturating_sub(base);

        if alloc::is_tracking() {
            row.train_memory_gb = Some(train_peak as f64 / GB);
            row.infer_memory_gb = Some(infer_peak as f64 / GB);
            last = Some((n, train_peak));
        }
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// CSV with one column per `n` and one row per measurement; unmeasured
/// cells hold `OOM` or `n/a`.
pub fn bench_table_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("metric");
    for r in rows {
        let _ = write!(s, ",{}", r.n);
    }
    s.push('\n');
    let fields: [(&str, fn(&BenchRow) -> Option<f64>); 4] = [
        ("train_time_s", |r| r.train_time_s),
        ("train_memory_gb", |r| r.train_memory_gb),
        ("infer_time_s", |r| r.infer_time_s),
        ("infer_memory_gb", |r| r.infer_memory_gb),
    ];
    for (name, get) in fields {
        s.push_str(name);
        for r in rows {
            match get(r) {
                Some(v) => {
                    let _ = write!(s, ",{:.4}", v);
                }
                None if r.oom => s.push_str(",OOM"),
                None => s.push_str(",n/a"),
            }
        }
        s.push('\n');
    }
    s
}
