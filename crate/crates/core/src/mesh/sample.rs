use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{IndexedFaceSet, MeshError, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub point: Vec3,
    pub normal: Vec3,
    pub face: usize,
    /// Weights of the face's three corners, summing to 1.
    pub bary: [f64; 3],
}

/// Draws uniform random barycentric weights for a triangle.
pub fn random_barycentric<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let r1 = rng.random::<f64>().sqrt();
    let r2 = rng.random::<f64>();
    [1.0 - r1, r1 * (1.0 - r2), r1 * r2]
}

/// Area-weighted face choice followed by uniform placement inside the face.
pub fn sample_surface(mesh: &IndexedFaceSet, k: usize, seed: u64) -> Result<Vec<SurfaceSample>, MeshError> {
    let mut cdf = Vec::with_capacity(mesh.face_count());
    let mut total = 0.0;
    for f in 0..mesh.face_count() {
        total += mesh.face_area(f);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(MeshError::ZeroArea);
    }
    let normals: Vec<Vec3> = (0..mesh.face_count())
        .map(|f| {
            let [a, b, c] = mesh.triangle(f);
            let n = (b - a).cross(&(c - a));
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let u = rng.random::<f64>() * total;
        let face = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let bary = random_barycentric(&mut rng);
        let [a, b, c] = mesh.triangle(face);
        out.push(SurfaceSample { point: a * bary[0] + b * bary[1] + c * bary[2], normal: normals[face], face, bary });
    }
    Ok(out)
}
