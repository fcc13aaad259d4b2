//! Row layouts for batched graphs. Samples are stacked into one
//! block-diagonal graph; nodes of sample `b` occupy rows
//! `node_offsets[b]..node_offsets[b + 1]`.

use std::sync::Arc;

use crate::autodiff::Segments;
use crate::mesh::DualGraph;

fn offsets(counts: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut out = vec![0];
    for c in counts {
        out.push(out.last().unwrap() + c);
    }
    out
}

/// Ordered vertex pairs `(i, j)`, `i ≠ j`, of every sample. Within a sample
/// the pair `(i, j)` sits at row `i·(n−1) + j − [j > i]`.
#[derive(Debug, Clone)]
pub struct PairIndex {
    pub counts: Vec<usize>,
    pub node_offsets: Vec<usize>,
    pub pair_offsets: Vec<usize>,
    pub first: Arc<Vec<usize>>,
    pub second: Arc<Vec<usize>>,
    /// Per node, every pair row it takes part in (either end).
    pub incident: Arc<Segments>,
    /// Unordered pairs `(sample, i, j)` with `i < j`, sample-major.
    pub unordered: Vec<(usize, usize, usize)>,
    pub unordered_offsets: Vec<usize>,
    pub row_ij: Arc<Vec<usize>>,
    pub row_ji: Arc<Vec<usize>>,
}

impl PairIndex {
    pub fn new(counts: &[usize]) -> Self {
        let node_offsets = offsets(counts.iter().copied());
        let pair_offsets = offsets(counts.iter().map(|&n| n * n.saturating_sub(1)));
        let unordered_offsets = offsets(counts.iter().map(|&n| n * n.saturating_sub(1) / 2));
        let total = *pair_offsets.last().unwrap();
        let mut first = Vec::with_capacity(total);
        let mut second = Vec::with_capacity(total);
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); *node_offsets.last().unwrap()];
        let mut unordered = Vec::new();
        let (mut row_ij, mut row_ji) = (Vec::new(), Vec::new());
        for (b, &n) in counts.iter().enumerate() {
            let (no, po) = (node_offsets[b], pair_offsets[b]);
            let row = |i: usize, j: usize| po + i * (n - 1) + j - usize::from(j > i);
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    let r = row(i, j);
                    debug_assert_eq!(r, first.len());
                    first.push(no + i);
                    second.push(no + j);
                    groups[no + i].push(r);
                    groups[no + j].push(r);
                    if i < j {
                        unordered.push((b, i, j));
                        row_ij.push(r);
                        row_ji.push(row(j, i));
                    }
                }
            }
        }
        Self {
            counts: counts.to_vec(),
            node_offsets,
            pair_offsets,
            first: Arc::new(first),
            second: Arc::new(second),
            incident: Arc::new(Segments::from_groups(groups)),
            unordered,
            unordered_offsets,
            row_ij: Arc::new(row_ij),
            row_ji: Arc::new(row_ji),
        }
    }

    pub fn nodes(&self) -> usize {
        *self.node_offsets.last().unwrap()
    }

    pub fn pairs(&self) -> usize {
        self.first.len()
    }
}

/// Ordered distinct vertex triples of every sample, grouped by the unordered
/// triple they enumerate.
#[derive(Debug, Clone)]
pub struct TripleIndex {
    pub counts: Vec<usize>,
    pub node_offsets: Vec<usize>,
    pub parts: [Arc<Vec<usize>>; 3],
    /// Per node, every triple row containing it.
    pub incident: Arc<Segments>,
    /// Unordered triples `(sample, [i, j, k])`, `i < j < k`, sample-major.
    pub unordered: Vec<(usize, [usize; 3])>,
    pub unordered_offsets: Vec<usize>,
    /// Per unordered triple, its six ordered rows.
    pub orderings: Arc<Segments>,
}

impl TripleIndex {
    pub fn new(counts: &[usize]) -> Self {
        let node_offsets = offsets(counts.iter().copied());
        let mut parts: [Vec<usize>; 3] = Default::default();
        let mut incident: Vec<Vec<usize>> = vec![Vec::new(); *node_offsets.last().unwrap()];
        let mut unordered = Vec::new();
        let mut unordered_offsets = vec![0];
        let mut orderings: Vec<Vec<usize>> = Vec::new();
        for (b, &n) in counts.iter().enumerate() {
            let no = node_offsets[b];
            let base = unordered.len();
            let mut id = vec![usize::MAX; n * n * n];
            for i in 0..n {
                for j in i + 1..n {
                    for k in j + 1..n {
                        id[(i * n + j) * n + k] = unordered.len();
                        unordered.push((b, [i, j, k]));
                        orderings.push(Vec::with_capacity(6));
                    }
                }
            }
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    for k in (0..n).filter(|&k| k != i && k != j) {
                        let row = parts[0].len();
                        for (p, v) in [i, j, k].into_iter().enumerate() {
                            parts[p].push(no + v);
                            incident[no + v].push(row);
                        }
                        let mut s = [i, j, k];
                        s.sort_unstable();
                        orderings[id[(s[0] * n + s[1]) * n + s[2]]].push(row);
                    }
                }
            }
            debug_assert!(orderings[base..].iter().all(|g| g.len() == 6));
            unordered_offsets.push(unordered.len());
        }
        let [a, b, c] = parts;
        Self {
            counts: counts.to_vec(),
            node_offsets,
            parts: [Arc::new(a), Arc::new(b), Arc::new(c)],
            incident: Arc::new(Segments::from_groups(incident)),
            unordered,
            unordered_offsets,
            orderings: Arc::new(Segments::from_groups(orderings)),
        }
    }

    pub fn rows(&self) -> usize {
        self.parts[0].len()
    }
}

/// Directed dual edges of a batch of dual graphs (each undirected adjacency
/// appears in both directions).
#[derive(Debug, Clone)]
pub struct DualIndex {
    pub node_offsets: Vec<usize>,
    pub src: Arc<Vec<usize>>,
    pub dst: Arc<Vec<usize>>,
    /// Per node, the rows of edges pointing into it.
    pub incoming: Arc<Segments>,
}

impl DualIndex {
    pub fn new(duals: &[&DualGraph]) -> Self {
        let node_offsets = offsets(duals.iter().map(|d| d.len()));
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); *node_offsets.last().unwrap()];
        for (b, d) in duals.iter().enumerate() {
            let no = node_offsets[b];
            for (t, nbrs) in d.adjacency.iter().enumerate() {
                for &s in nbrs {
                    incoming[no + t].push(src.len());
                    src.push(no + s);
                    dst.push(no + t);
                }
            }
        }
        Self { node_offsets, src: Arc::new(src), dst: Arc::new(dst), incoming: Arc::new(Segments::from_groups(incoming)) }
    }

    pub fn nodes(&self) -> usize {
        *self.node_offsets.last().unwrap()
    }
}
