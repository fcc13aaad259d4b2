use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::losses::target_samples;
use crate::mesh::shapes::BuiltinShape;
use crate::mesh::{decimate, read_obj, write_obj, IndexedFaceSet, DEFAULT_TARGET_VERTICES};
use crate::virtual_scan::{scan_mesh, TsdfVolume};

/// Scanning trajectories synthesized per shape.
pub const DEFAULT_TRAJECTORIES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One row of the dataset index. Paths are relative to the index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub class: String,
    pub split: Split,
    pub tsdf: PathBuf,
    pub mesh: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let entries = rdr.deserialize().collect::<Result<Vec<IndexEntry>, _>>()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let index = Self { root, entries };
        index.validate()?;
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rejects duplicate names and files shared between splits.
    pub fn validate(&self) -> Result<()> {
        let mut split_of: HashMap<&Path, Split> = HashMap::new();
        let mut names = std::collections::HashSet::new();
        for e in &self.entries {
            if !names.insert(e.name.as_str()) {
                return Err(TrainError::Dataset(format!("duplicate sample name {}", e.name)));
            }
            for f in [e.tsdf.as_path(), e.mesh.as_path()] {
                match split_of.insert(f, e.split) {
                    Some(s) if s != e.split => {
                        return Err(TrainError::Dataset(format!("{} appears in {:?} and {:?}", f.display(), s, e.split)))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Reads every entry of `split`, sharing target meshes between
    /// trajectories of one shape.
    pub fn load_samples(&self, split: Split, chamfer_samples: usize) -> Result<Vec<Sample>> {
        let mut meshes: HashMap<PathBuf, (Arc<IndexedFaceSet>, Arc<Vec<[f64; 3]>>)> = HashMap::new();
        let mut out = Vec::new();
        for (i, e) in self.split(split).enumerate() {
            let volume = TsdfVolume::load(&self.root.join(&e.tsdf))?;
            let (mesh, cloud) = match meshes.get(&e.mesh) {
                Some(m) => m.clone(),
                None => {
                    let m = read_obj(&self.root.join(&e.mesh))?;
                    let cloud = target_samples(&m, chamfer_samples, i as u64)?;
                    let v = (Arc::new(m), cloud);
                    meshes.insert(e.mesh.clone(), v.clone());
                    v
                }
            };
            out.push(Sample { name: e.name.clone(), class: e.class.clone(), volume: Arc::new(volume), mesh, cloud });
        }
        Ok(out)
    }
}

/// A training pair held in memory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub class: String,
    pub volume: Arc<TsdfVolume>,
    pub mesh: Arc<IndexedFaceSet>,
    /// Fixed target samples for the chamfer stage.
    pub cloud: Arc<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenOptions {
    pub views: usize,
    pub trajectories: usize,
    pub seed: u64,
    pub target_vertices: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            views: 1,
            trajectories: DEFAULT_TRAJECTORIES,
            seed: 0,
            target_vertices: DEFAULT_TARGET_VERTICES,
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GenSummary {
    pub index: DatasetIndex,
    pub index_path: PathBuf,
    /// Shapes that could not be scanned or decimated, with the reason.
    pub skipped: Vec<(String, String)>,
    pub files: Vec<PathBuf>,
}

/// Scans each shape `opts.trajectories` times from distinct camera
/// placements and writes `meshes/`, `tsdf/` and `index.csv` under `out`.
/// Splits are assigned per shape, so trajectories of one shape never cross
/// splits.
pub fn generate_dataset(shapes: &[BuiltinShape], opts: &GenOptions, out: &Path) -> Result<GenSummary> {
    if opts.views == 0 || opts.trajectories == 0 {
        return Err(TrainError::Config("views and trajectories must be at least 1".into()));
    }
    fs::create_dir_all(out.join("meshes"))?;
    fs::create_dir_all(out.join("tsdf"))?;
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let n_test = (shapes.len() as f64 * opts.test_fraction).round() as usize;
    let n_val = (shapes.len() as f64 * opts.val_fraction).round() as usize;
    let mut split = vec![Split::Train; shapes.len()];
    for (rank, &s) in order.iter().enumerate() {
        if rank < n_test {
            split[s] = Split::Test;
        } else if rank < n_test + n_val {
            split[s] = Split::Val;
        }
    }

    let mut summary = GenSummary::default();
    for (s, shape) in shapes.iter().enumerate() {
        let target = match decimate(&shape.mesh, opts.target_vertices) {
            Ok(m) => m,
            Err(e) => {
                summary.skipped.push((shape.name.clone(), e.to_string()));
                continue;
            }
        };
        let mut scans = Vec::with_capacity(opts.trajectories);
        for t in 0..opts.trajectories {
            let seed = opts.seed.wrapping_mul(0x9e37_79b9).wrapping_add((s * opts.trajectories + t) as u64);
            match scan_mesh(&shape.mesh, opts.views, seed) {
                Ok(scan) => scans.push(scan.volume),
                Err(e) => {
                    summary.skipped.push((shape.name.clone(), e.to_string()));
                    break;
                }
            }
        }
        if scans.len() < opts.trajectories {
            continue;
        }
        let mesh_rel = PathBuf::from("meshes").join(format!("{}.obj", shape.name));
        write_obj(&out.join(&mesh_rel), &target)?;
        summary.files.push(mesh_rel.clone());
        for (t, vol) in scans.iter().enumerate() {
            let tsdf_rel = PathBuf::from("tsdf").join(format!("{}_t{}.tsdf", shape.name, t));
            vol.save(&out.join(&tsdf_rel))?;
            summary.files.push(tsdf_rel.clone());
            summary.index.entries.push(IndexEntry {
                name: format!("{}_t{}", shape.name, t),
                class: shape.class.clone(),
                split: split[s],
                tsdf: tsdf_rel,
                mesh: mesh_rel.clone(),
            });
        }
    }
    summary.index.root = out.to_path_buf();
    summary.index.validate()?;
    summary.index_path = out.join("index.csv");
    summary.index.save(&summary.index_path)?;
    Ok(summary)
}

/// Reads every `.obj` under `dir` (one level of class subdirectories
/// allowed) as unit-cube shapes. Unreadable files are returned separately.
pub fn load_shape_dir(dir: &Path) -> Result<(Vec<BuiltinShape>, Vec<(String, String)>)> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            for inner in fs::read_dir(&path)? {
                let p = inner?.path();
                if is_obj(&p) {
                    let class = path.file_name().map(|c| c.to_string_lossy().into_owned()).unwrap_or_default();
                    files.push((p, class));
                }
            }
        } else if is_obj(&path) {
            files.push((path, "shape".to_string()));
        }
    }
    files.sort();
    let mut shapes = Vec::new();
    let mut skipped = Vec::new();
    for (path, class) in files {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match read_obj(&path).and_then(|m| m.normalized_unit()) {
            Ok(mesh) => shapes.push(BuiltinShape { name: stem, class, mesh }),
            Err(e) => skipped.push((path.display().to_string(), e.to_string())),
        }
    }
    Ok((shapes, skipped))
}

fn is_obj(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes::builtin_corpus;

    #[test]
    fn index_rejects_cross_split_files() {
        let e = |name: &str, split, mesh: &str| IndexEntry {
            name: name.into(),
            class: "box".into(),
            split,
            tsdf: format!("tsdf/{}.tsdf", name).into(),
            mesh: mesh.into(),
        };
        let ok = DatasetIndex {
            root: PathBuf::new(),
            entries: vec![e("a_t0", Split::Train, "m/a.obj"), e("a_t1", Split::Train, "m/a.obj")],
        };
        ok.validate().unwrap();
        let bad = DatasetIndex {
            root: PathBuf::new(),
            entries: vec![e("a_t0", Split::Train, "m/a.obj"), e("a_t1", Split::Test, "m/a.obj")],
        };
        assert!(matches!(bad.validate(), Err(TrainError::Dataset(_))));
    }

    #[test]
    fn generate_writes_two_trajectories_per_shape() {
        let dir = tempfile::tempdir().unwrap();
        let shapes = builtin_corpus(5, &["box", "bracket"], 3);
        let opts = GenOptions { val_fraction: 0.2, test_fraction: 0.2, ..Default::default() };
        let s = generate_dataset(&shapes, &opts, dir.path()).unwrap();
        assert!(s.skipped.is_empty());
        assert_eq!(s.index.entries.len(), 10);
        let back = DatasetIndex::load(&s.index_path).unwrap();
        assert_eq!(back.entries, s.index.entries);
        assert_eq!(back.split(Split::Test).count(), 2);
        assert_eq!(back.split(Split::Val).count(), 2);
        let train = back.load_samples(Split::Train, 64).unwrap();
        assert_eq!(train.len(), 6);
        assert!(Arc::ptr_eq(&train[0].mesh, &train[1].mesh));
        assert_ne!(train[0].volume.channel(0), train[1].volume.channel(0));
    }
}
