use super::Vec3;

/// Length of the per-face descriptor: centroid, normal, area, circumradius.
pub const FACE_FEATURE_DIM: usize = 8;

/// Circumradius reported for collinear triangles.
pub const DEGENERATE_RADIUS_CAP: f64 = 1000.0;

/// Relative tolerance on `|cross| / max_edge²` below which a triangle counts
/// as collinear.
const DEGENERATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceFeatures {
    pub centroid: Vec3,
    pub normal: Vec3,
    pub area: f64,
    pub radius: f64,
    pub degenerate: bool,
}

impl FaceFeatures {
    pub fn to_array(&self) -> [f64; FACE_FEATURE_DIM] {
        let c = self.centroid;
        let n = self.normal;
        [c.x, c.y, c.z, n.x, n.y, n.z, self.area, self.radius]
    }
}

fn lex_less(a: &Vec3, b: &Vec3) -> bool {
    (a.x, a.y, a.z) < (b.x, b.y, b.z)
}

/// Rotates the triangle so its lexicographically smallest vertex comes first,
/// keeping the cyclic order.
pub fn orient_by_position(tri: [Vec3; 3]) -> [Vec3; 3] {
    let mut first = 0;
    for i in 1..3 {
        if lex_less(&tri[i], &tri[first]) {
            first = i;
        }
    }
    [tri[first], tri[(first + 1) % 3], tri[(first + 2) % 3]]
}

/// Descriptor of one triangle. The normal follows [`orient_by_position`].
pub fn face_features(tri: [Vec3; 3]) -> FaceFeatures {
    let [a, b, c] = orient_by_position(tri);
    let centroid = (a + b + c) / 3.0;
    let cross = (b - a).cross(&(c - a));
    let cn = cross.norm();
    let la = (b - c).norm();
    let lb = (c - a).norm();
    let lc = (a - b).norm();
    let longest = la.max(lb).max(lc);
    let area = 0.5 * cn;
    if !(cn > DEGENERATE_TOL * longest * longest) || longest == 0.0 {
        return FaceFeatures { centroid, normal: Vec3::zeros(), area, radius: DEGENERATE_RADIUS_CAP, degenerate: true };
    }
    let radius = (la * lb * lc / (4.0 * area)).min(DEGENERATE_RADIUS_CAP);
    FaceFeatures { centroid, normal: cross / cn, area, radius, degenerate: false }
}
