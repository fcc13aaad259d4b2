//! Evaluation metrics on sampled surfaces: mean nearest-point distance and
//! normal similarity, plus CSV reporting.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::mesh::{sample_surface, IndexedFaceSet, MeshError, SurfaceSample, Vec3};

/// Samples per mesh for evaluation.
pub const EVAL_SAMPLES: usize = 10_000;
/// Radius around the nearest point searched for the best-aligned normal.
pub const NORMAL_WINDOW: f64 = 0.03;
/// Both meshes are sampled with this seed.
pub const EVAL_SEED: u64 = 0x5eed;

/// Uniform bucket grid over a point set for nearest-neighbor and radius
/// queries.
pub struct PointGrid<'a> {
    points: &'a [Vec3],
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if points.is_empty() {
            lo = Vec3::zeros();
            hi = Vec3::zeros();
        }
        let ext = hi - lo;
        // About two points per occupied cell on a surface sample.
        let area_scale = (ext.x * ext.y + ext.y * ext.z + ext.z * ext.x).max(1e-300);
        let mut cell = (2.0 * area_scale / points.len().max(1) as f64).sqrt();
        if !(cell > 0.0) || !cell.is_finite() {
            cell = 1.0;
        }
        cell = cell.max(ext.max() / 256.0);
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as usize + 1).min(257));
        let mut counts = vec![0usize; dims[0] * dims[1] * dims[2] + 1];
        let mut grid = Self { points, origin: lo, cell, dims, start: Vec::new(), order: Vec::new() };
        let keys: Vec<usize> = points.iter().map(|p| grid.key(&grid.cell_of(p))).collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.start = counts;
        grid.order = order;
        grid
    }

    fn cell_of(&self, p: &Vec3) -> [isize; 3] {
        [0, 1, 2].map(|a| ((p[a] - self.origin[a]) / self.cell).floor() as isize)
    }

    fn clamp(&self, c: [isize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| c[a].clamp(0, self.dims[a] as isize - 1) as usize)
    }

    fn key(&self, c: &[isize; 3]) -> usize {
        let c = self.clamp(*c);
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn bucket(&self, c: [usize; 3]) -> &[usize] {
        let k = (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0];
        &self.order[self.start[k]..self.start[k + 1]]
    }

    /// Lower bound on the distance from `p` to any point outside Chebyshev
    /// ring `r` around cell `center`.
    fn ring_bound(&self, p: &Vec3, center: [usize; 3], r: usize) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..3 {
            if center[a] > r {
                best = best.min(p[a] - (self.origin[a] + (center[a] - r) as f64 * self.cell));
            }
            if center[a] + r + 1 < self.dims[a] {
                best = best.min(self.origin[a] + (center[a] + r + 1) as f64 * self.cell - p[a]);
            }
        }
        best.max(0.0)
    }

    /// Index and distance of the nearest point. Ties go to the lower index.
    pub fn nearest(&self, p: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let c = self.clamp(self.cell_of(p));
        let max_r = *self.dims.iter().max().unwrap();
        let mut best: Option<(usize, f64)> = None;
        for r in 0..=max_r {
            self.visit_ring(c, r, |i| {
                let d = (self.points[i] - p).norm_squared();
                if best.is_none_or(|(bi, bd)| d < bd || (d == bd && i < bi)) {
                    best = Some((i, d));
                }
            });
            if let Some((_, bd)) = best {
                let bound = self.ring_bound(p, c, r);
                if bd.sqrt() <= bound {
                    break;
                }
            }
        }
        best.map(|(i, d)| (i, d.sqrt()))
    }

    /// Indices of points within `radius` of `p`.
    pub fn within(&self, p: &Vec3, radius: f64) -> Vec<usize> {
        let lo = self.clamp(self.cell_of(&(p - Vec3::repeat(radius))));
        let hi = self.clamp(self.cell_of(&(p + Vec3::repeat(radius))));
        let mut out = Vec::new();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    out.extend(self.bucket([x, y, z]).iter().filter(|&&i| (self.points[i] - p).norm() <= radius));
                }
            }
        }
        out
    }

    fn visit_ring(&self, c: [usize; 3], r: usize, mut f: impl FnMut(usize)) {
        let r = r as isize;
        let lo = |a: usize| (c[a] as isize - r).max(0);
        let hi = |a: usize| (c[a] as isize + r).min(self.dims[a] as isize - 1);
        for z in lo(2)..=hi(2) {
            for y in lo(1)..=hi(1) {
                for x in lo(0)..=hi(0) {
                    let on_shell = [x, y, z].iter().zip(c).any(|(&v, cc)| (v - cc as isize).abs() == r);
                    if on_shell {
                        for &i in self.bucket([x as usize, y as usize, z as usize]) {
                            f(i);
                        }
                    }
                }
            }
        }
    }
}

fn points(s: &[SurfaceSample]) -> Vec<Vec3> {
    s.iter().map(|x| x.point).collect()
}

fn mean_nn(from: &[Vec3], to: &PointGrid) -> f64 {
    from.iter().map(|p| to.nearest(p).expect("non-empty").1).sum::<f64>() / from.len() as f64
}

/// `0.5·(mean_a min_b |a − b| + mean_b min_a |a − b|)` over `k` surface
/// samples per mesh (unsquared).
pub fn eval_mesh_distance(a: &IndexedFaceSet, b: &IndexedFaceSet, k: usize) -> Result<f64, MeshError> {
    let (sa, sb) = (sample_surface(a, k, EVAL_SEED)?, sample_surface(b, k, EVAL_SEED)?);
    Ok(distance_between(&points(&sa), &points(&sb)))
}

pub fn distance_between(pa: &[Vec3], pb: &[Vec3]) -> f64 {
    let (ga, gb) = (PointGrid::new(pa), PointGrid::new(pb));
    0.5 * (mean_nn(pa, &gb) + mean_nn(pb, &ga))
}

fn directed_nsim(from: &[SurfaceSample], to: &[SurfaceSample], grid: &PointGrid, window: f64) -> f64 {
    let mut total = 0.0;
    for s in from {
        let (nearest, _) = grid.nearest(&s.point).expect("non-empty");
        let cands = grid.within(&to[nearest].point, window);
        let best = if cands.is_empty() {
            s.normal.dot(&to[nearest].normal).abs()
        } else {
            cands.iter().map(|&i| s.normal.dot(&to[i].normal).abs()).fold(0.0, f64::max)
        };
        total += best.min(1.0);
    }
    total / from.len() as f64
}

/// Orientation-agnostic normal similarity in `[0, 1]`: for every sample, the
/// best `|cos|` against the other mesh's samples within `window` of its
/// nearest point, averaged and symmetrized.
pub fn eval_normal_similarity(a: &IndexedFaceSet, b: &IndexedFaceSet, k: usize, window: f64) -> Result<f64, MeshError> {
    let (sa, sb) = (sample_surface(a, k, EVAL_SEED)?, sample_surface(b, k, EVAL_SEED)?);
    let (pa, pb) = (points(&sa), points(&sb));
    let (ga, gb) = (PointGrid::new(&pa), PointGrid::new(&pb));
    Ok(0.5 * (directed_nsim(&sa, &sb, &gb, window) + directed_nsim(&sb, &sa, &ga, window)))
}

/// One evaluated prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub name: String,
    pub class: String,
    pub dist: f64,
    pub nsim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummary {
    pub class: String,
    pub count: usize,
    pub dist: f64,
    pub nsim: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn push(&mut self, name: impl Into<String>, class: impl Into<String>, pred: &IndexedFaceSet, gt: &IndexedFaceSet) -> Result<(), MeshError> {
        let dist = eval_mesh_distance(pred, gt, EVAL_SAMPLES)?;
        let nsim = eval_normal_similarity(pred, gt, EVAL_SAMPLES, NORMAL_WINDOW)?;
        self.rows.push(EvalRow { name: name.into(), class: class.into(), dist, nsim });
        Ok(())
    }

    /// Per-class means followed by the overall mean (class `"mean"`).
    pub fn summary(&self) -> Vec<ClassSummary> {
        let mut by: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
        for r in &self.rows {
            let e = by.entry(&r.class).or_default();
            e.0 += 1;
            e.1 += r.dist;
            e.2 += r.nsim;
        }
        let mut out: Vec<ClassSummary> = by
            .into_iter()
            .map(|(c, (n, d, s))| ClassSummary { class: c.to_string(), count: n, dist: d / n as f64, nsim: s / n as f64 })
            .collect();
        if !self.rows.is_empty() {
            let n = self.rows.len() as f64;
            out.push(ClassSummary {
                class: "mean".into(),
                count: self.rows.len(),
                dist: self.rows.iter().map(|r| r.dist).sum::<f64>() / n,
                nsim: self.rows.iter().map(|r| r.nsim).sum::<f64>() / n,
            });
        }
        out
    }

    /// Per-sample CSV: `name,class,dist,nsim`.
    pub fn write_rows_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        if self.rows.is_empty() {
            wr.write_record(["name", "class", "dist", "nsim"])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Summary CSV: `class,count,dist,nsim`.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for s in self.summary() {
            wr.serialize(s)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Fixed-width table with one `Dist`/`NSim` row per class.
    pub fn summary_table(&self) -> String {
        let mut s = format!("{:<16} {:>6} {:>10} {:>8}\n", "class", "count", "Dist", "NSim");
        for c in self.summary() {
            s.push_str(&format!("{:<16} {:>6} {:>10.5} {:>8.4}\n", c.class, c.count, c.dist, c.nsim));
        }
        s
    }
}
