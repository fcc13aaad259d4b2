//! One-to-one matching of predicted to target vertices: the Hungarian
//! algorithm and a greedy baseline.

use crate::mesh::Vec3;

/// Injective partial map from rows (predictions) to columns (targets).
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub mapping: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl Assignment {
    fn empty(rows: usize) -> Self {
        Self { mapping: vec![None; rows], total_cost: 0.0 }
    }

    /// Matched `(row, col)` pairs in row order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.mapping.iter().enumerate().filter_map(|(r, c)| c.map(|c| (r, c)))
    }

    pub fn len(&self) -> usize {
        self.mapping.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column → row lookup for `cols` columns.
    pub fn inverse(&self, cols: usize) -> Vec<Option<usize>> {
        let mut inv = vec![None; cols];
        for (r, c) in self.pairs() {
            inv[c] = Some(r);
        }
        inv
    }
}

/// Row-major `rows × cols` cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "cost matrix size");
        Self { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.at(r, c);
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }

    fn total(&self, mapping: &[Option<usize>]) -> f64 {
        mapping.iter().enumerate().filter_map(|(r, c)| c.map(|c| self.at(r, c))).sum()
    }
}

/// `cost[i][j] = |pred_i − target_j|₁`.
pub fn vertex_cost_matrix(pred: &[Vec3], target: &[Vec3]) -> CostMatrix {
    let mut data = Vec::with_capacity(pred.len() * target.len());
    for p in pred {
        data.extend(target.iter().map(|t| (p - t).abs().sum()));
    }
    CostMatrix::new(pred.len(), target.len(), data)
}

/// Minimum-cost matching of size `min(rows, cols)`, O(n²m) with
/// shortest-augmenting-path potentials.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    if cost.rows == 0 || cost.cols == 0 {
        return Assignment::empty(cost.rows);
    }
    if cost.rows > cost.cols {
        let t = hungarian(&cost.transpose());
        let mut mapping = vec![None; cost.rows];
        for (c, r) in t.pairs() {
            mapping[r] = Some(c);
        }
        return Assignment { total_cost: cost.total(&mapping), mapping };
    }
    let (n, m) = (cost.rows, cost.cols);
    // 1-based arrays; column 0 is a virtual start node.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![None; n];
    for j in 1..=m {
        if owner[j] != 0 {
            mapping[owner[j] - 1] = Some(j - 1);
        }
    }
    Assignment { total_cost: cost.total(&mapping), mapping }
}

/// Repeatedly takes the cheapest remaining `(row, col)` pair; ties go to the
/// lower row, then the lower column.
pub fn greedy_match(cost: &CostMatrix) -> Assignment {
    let mut cells: Vec<(f64, usize, usize)> =
        (0..cost.rows).flat_map(|r| (0..cost.cols).map(move |c| (r, c))).map(|(r, c)| (cost.at(r, c), r, c)).collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut mapping = vec![None; cost.rows];
    let mut col_used = vec![false; cost.cols];
    let mut left = cost.rows.min(cost.cols);
    for (_, r, c) in cells {
        if left == 0 {
            break;
        }
        if mapping[r].is_none() && !col_used[c] {
            mapping[r] = Some(c);
            col_used[c] = true;
            left -= 1;
        }
    }
    Assignment { total_cost: cost.total(&mapping), mapping }
}
