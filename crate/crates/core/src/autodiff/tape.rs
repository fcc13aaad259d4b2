//! Wengert-list tape: forward primitives record themselves, `backward`
//! replays the adjoints in reverse insertion order.

use std::sync::Arc;

use rand::Rng;

use super::conv::{self, ConvGeom};
use super::tensor::{gemm, Tensor};
use super::{AutodiffError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row groups in CSR form. Segment `g` covers `members[offsets[g]..offsets[g + 1]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl Segments {
    pub fn from_groups<I, G>(groups: I) -> Self
    where
        I: IntoIterator<Item = G>,
        G: IntoIterator<Item = usize>,
    {
        let mut offsets = vec![0];
        let mut members = Vec::new();
        for g in groups {
            members.extend(g);
            offsets.push(members.len());
        }
        Self { offsets, members }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.members[self.offsets[g]..self.offsets[g + 1]]
    }

    fn max_member(&self) -> Option<usize> {
        self.members.iter().copied().max()
    }
}

/// Result of a training-mode batch norm: output plus the batch statistics
/// the caller folds into its running averages.
pub struct BatchStats {
    pub out: Var,
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, Var),
    AddRow(Var, Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Arc<Vec<usize>>),
    SegmentSum(Var, Arc<Segments>),
    GatherSum { parts: Vec<(Var, Arc<Vec<usize>>)>, bias: Option<Var> },
    Relu(Var),
    Elu(Var),
    Conv3d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    SoftmaxPick { logits: Var, class: usize, probs: Vec<f64> },
    L1 { x: Var, target: Vec<f64>, norm: f64 },
    Chamfer(Box<ChamferSaved>),
    Sum(Var),
    Reshape(Var),
    ChannelsLast { x: Var, batch: usize, channels: usize, spatial: usize },
}

#[derive(Debug)]
struct ChamferSaved {
    points: Var,
    weights: Option<Var>,
    target: Arc<Vec<[f64; 3]>>,
    /// Nearest target index for every predicted point, and its squared distance.
    fwd_nn: Vec<(usize, f64)>,
    /// Nearest predicted index for every target point, and its squared distance.
    bwd_nn: Vec<(usize, f64)>,
    weight_vals: Vec<f64>,
    term1: f64,
}

/// Floor applied to chamfer sample weights before dividing by them.
pub const CHAMFER_WEIGHT_FLOOR: f64 = 1e-4;

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
///
/// Tapes are single-threaded and meant to live for one training step;
/// independent samples may use independent tapes concurrently.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Sums `values` in ascending order so the result depends only on the
/// multiset of inputs, never on their arrival order.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Leaves with `requires_grad` accumulate gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First element of a value; used for scalar losses.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| shape_err(op, format!("expected a matrix, got {:?}", self.shape(v))))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Fully-connected layer `x·w + b` with `w` shaped `in×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims2("linear", x)?;
        let (k2, n) = self.dims2("linear", w)?;
        if k != k2 {
            return Err(shape_err("linear", format!("x {:?}, w {:?}", self.shape(x), self.shape(w))));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != n {
                return Err(shape_err("linear", format!("bias {:?} for {} outputs", self.shape(b), n)));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
            gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, 1.0);
        } else {
            gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, 0.0);
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }, rg))
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rec, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect()).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// `a / s` for a one-element `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("div_scalar", format!("divisor {:?}", self.shape(s))));
        }
        let d = self.value(s).data()[0];
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x / d).collect())?;
        let rg = self.rg(&[a, s]);
        Ok(self.push(t, Op::DivScalar(a, s), rg))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2("add_row", a)?;
        let bias = self.value(row).data();
        if bias.len() != c {
            return Err(shape_err("add_row", format!("{:?} + {:?}", self.shape(a), self.shape(row))));
        }
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_exact_mut(c) {
            chunk.iter_mut().zip(bias).for_each(|(x, b)| *x += b);
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::AddRow(a, row), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x.max(0.0)).collect()).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| elu(*x)).collect()).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Elu(a), rg)
    }

    // ---- structural ----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// `[B, C, spatial...]` to `[B·S, C]`: one row per spatial cell, cells of
    /// sample `b` occupying rows `b·S..(b+1)·S` in row-major spatial order.
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(shape_err("channels_last", format!("need [B, C, ...], got {:?}", shape)));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for c in 0..channels {
                let plane = &src[(b * channels + c) * spatial..(b * channels + c + 1) * spatial];
                for (s, v) in plane.iter().enumerate() {
                    out[(b * spatial + s) * channels + c] = *v;
                }
            }
        }
        let rg = self.rg(&[x]);
        let t = Tensor::new(vec![batch * spatial, channels], out)?;
        Ok(self.push(t, Op::ChannelsLast { x, batch, channels, spatial }, rg))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.dims2("concat", p)?);
        }
        let rows = dims[0].0;
        if dims.iter().any(|d| d.0 != rows) {
            return Err(shape_err("concat", format!("row counts {:?}", dims)));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (r, c) = self.dims2("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("index {} out of {} rows", bad, r)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        let n = idx.len();
        Ok(self.push(Tensor::new(vec![n, c], data)?, Op::GatherRows(a, idx), rg))
    }

    /// Sum over sets of rows: output row `g` is the sum of the rows listed in
    /// segment `g`. Summation order is canonical (sorted), so relabeling rows
    /// never changes the result bits.
    pub fn segment_sum(&mut self, a: Var, segs: Arc<Segments>) -> Result<Var> {
        let (r, c) = self.dims2("segment_sum", a)?;
        if let Some(m) = segs.max_member() {
            if m >= r {
                return Err(shape_err("segment_sum", format!("member {} out of {} rows", m, r)));
            }
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; segs.len() * c];
        let mut buf = Vec::new();
        for g in 0..segs.len() {
            let members = segs.group(g);
            for col in 0..c {
                buf.clear();
                buf.extend(members.iter().map(|&m| src[m * c + col]));
                out[g * c + col] = order_free_sum(&mut buf);
            }
        }
        let rg = self.rg(&[a]);
        let g = segs.len();
        Ok(self.push(Tensor::new(vec![g, c], out)?, Op::SegmentSum(a, segs), rg))
    }

    /// `out[p] = Σ_t parts[t].0[parts[t].1[p]] + bias`.
    ///
    /// With `parts[t].0 = h·W_t` this is a fully-connected layer applied to
    /// the row concatenation `[h[i_0], h[i_1], ...]` without materializing it.
    pub fn gather_sum(&mut self, parts: &[(Var, Arc<Vec<usize>>)], bias: Option<Var>) -> Result<Var> {
        let Some((first, idx0)) = parts.first() else {
            return Err(shape_err("gather_sum", "no inputs".into()));
        };
        let (_, c) = self.dims2("gather_sum", *first)?;
        let p = idx0.len();
        for (v, idx) in parts {
            let (r, cc) = self.dims2("gather_sum", *v)?;
            if cc != c || idx.len() != p || idx.iter().any(|&i| i >= r) {
                return Err(shape_err("gather_sum", format!("part {:?} with {} indices", self.shape(*v), idx.len())));
            }
        }
        let mut out = vec![0.0; p * c];
        for (v, idx) in parts {
            let src = self.value(*v).data();
            for (row, &i) in idx.iter().enumerate() {
                let dst = &mut out[row * c..(row + 1) * c];
                dst.iter_mut().zip(&src[i * c..(i + 1) * c]).for_each(|(d, s)| *d += s);
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            if bv.len() != c {
                return Err(shape_err("gather_sum", format!("bias {:?}", self.shape(b))));
            }
            for row in out.chunks_exact_mut(c) {
                row.iter_mut().zip(bv).for_each(|(d, s)| *d += s);
            }
        }
        let mut deps: Vec<Var> = parts.iter().map(|x| x.0).collect();
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(vec![p, c], out)?, Op::GatherSum { parts: parts.to_vec(), bias }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ---- convolution ----

    /// 3-D convolution. `input` is `[B, Cin, D, H, W]`, `weight` is
    /// `[Cout, Cin, k, k, k]`, `bias` is `[Cout]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::infer(self.shape(input), self.shape(weight), stride, pad)?;
        if let Some(b) = bias {
            if self.value(b).numel() != geom.c_out {
                return Err(shape_err("conv3d", format!("bias {:?} for {} channels", self.shape(b), geom.c_out)));
            }
        }
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        let t = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(t, Op::Conv3d { input, weight, bias, geom }, rg))
    }

    // ---- normalization / regularization ----

    /// Batch norm over the rows of an `N×C` matrix using batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<BatchStats> {
        let (n, c) = self.dims2("batch_norm", x)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err("batch_norm", format!("{} channels, gamma {:?}", c, self.shape(gamma))));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        let nf = n.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= nf);
        for row in xv.chunks_exact(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / nf).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let h = (xv[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let unbiased = if n > 1 { var.iter().map(|v| v / (nf - 1.0)).collect() } else { biased };
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(Tensor::new(vec![n, c], out)?, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, rg);
        Ok(BatchStats { out: v, mean, var: unbiased })
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (n, c) = self.dims2("batch_norm", x)?;
        if mean.len() != c || var.len() != c || self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err("batch_norm", format!("{} channels, stats {}", c, mean.len())));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = g[j] * ((xv[i * c + j] - mean[j]) * inv_std[j]) + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNormEval { x, gamma, beta, mean: mean.to_vec(), inv_std };
        Ok(self.push(Tensor::new(vec![n, c], out)?, op, rg))
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales the
    /// survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(shape_err("dropout", format!("probability {} outside [0, 1)", p)));
        }
        let keep = 1.0 / (1.0 - p);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.numel()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    // ---- losses ----

    /// Weighted mean softmax cross entropy over the rows of `N×C` logits:
    /// `Σ w_i·CE_i / Σ w_i`. Unit weights when `weights` is `None`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let (n, c) = self.dims2("softmax_cross_entropy", logits)?;
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(shape_err("softmax_cross_entropy", format!("{} labels for {}x{} logits", labels.len(), n, c)));
        }
        let weights = match weights {
            Some(w) if w.len() != n => {
                return Err(shape_err("softmax_cross_entropy", format!("{} weights for {} rows", w.len(), n)))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; n],
        };
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        let wsum: f64 = weights.iter().sum();
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            total += weights[i] * (lse - row[labels[i]]);
        }
        let loss = if wsum > 0.0 { total / wsum } else { 0.0 };
        let rg = self.rg(&[logits]);
        let op = Op::SoftmaxCe { logits, labels: labels.to_vec(), weights, probs };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Softmax probability of `class` for every row of `N×C` logits; returns `[N]`.
    pub fn softmax_pick(&mut self, logits: Var, class: usize) -> Result<Var> {
        let (n, c) = self.dims2("softmax_pick", logits)?;
        if class >= c {
            return Err(shape_err("softmax_pick", format!("class {} of {}", class, c)));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - mx).exp() / z;
            }
            out[i] = probs[i * c + class];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::vector(out), Op::SoftmaxPick { logits, class, probs }, rg))
    }

    /// `Σ |x − target| / norm`. The subgradient at a tie is 0.
    pub fn l1_loss(&mut self, x: Var, target: &Tensor, norm: f64) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(shape_err("l1", format!("{:?} vs target {:?}", self.shape(x), target.shape())));
        }
        if !(norm > 0.0) {
            return Err(shape_err("l1", format!("normalizer {}", norm)));
        }
        let s: f64 = self.value(x).data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
        let rg = self.rg(&[x]);
        let op = Op::L1 { x, target: target.data().to_vec(), norm };
        Ok(self.push(Tensor::scalar(s / norm), op, rg))
    }

    /// Symmetric squared chamfer between predicted points `[A, 3]` and a
    /// fixed target cloud.
    ///
    /// With per-point weights `w` (shape `[A]`):
    /// `Σ_s w_s·d(s, T)² / Σ_s w_s  +  mean_t min_s d(t, s)² / max(w_s, floor)`.
    /// Without weights both terms are plain means of nearest squared distances.
    pub fn chamfer(&mut self, points: Var, weights: Option<Var>, target: Arc<Vec<[f64; 3]>>) -> Result<Var> {
        let (a, three) = self.dims2("chamfer", points)?;
        if three != 3 || a == 0 || target.is_empty() {
            return Err(shape_err("chamfer", format!("points {:?}, {} targets", self.shape(points), target.len())));
        }
        let weight_vals = match weights {
            Some(w) => {
                if self.value(w).numel() != a {
                    return Err(shape_err("chamfer", format!("weights {:?} for {} points", self.shape(w), a)));
                }
                self.value(w).data().to_vec()
            }
            None => vec![1.0; a],
        };
        let pv = self.value(points).data();
        let mut fwd_nn = vec![(0usize, f64::INFINITY); a];
        let mut bwd_nn = vec![(0usize, f64::INFINITY); target.len()];
        let mut bwd_score = vec![f64::INFINITY; target.len()];
        for s in 0..a {
            let p = &pv[s * 3..s * 3 + 3];
            let ws = weight_vals[s].max(CHAMFER_WEIGHT_FLOOR);
            for (t, q) in target.iter().enumerate() {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < fwd_nn[s].1 {
                    fwd_nn[s] = (t, d);
                }
                let score = if weights.is_some() { d / ws } else { d };
                if score < bwd_score[t] {
                    bwd_score[t] = score;
                    bwd_nn[t] = (s, d);
                }
            }
        }
        let wsum: f64 = weight_vals.iter().sum();
        if !(wsum > 0.0) {
            return Err(shape_err("chamfer", "weights sum to zero".into()));
        }
        let term1 = fwd_nn.iter().zip(&weight_vals).map(|((_, d), w)| w * d).sum::<f64>() / wsum;
        let term2 = bwd_score.iter().sum::<f64>() / target.len() as f64;
        let mut deps = vec![points];
        deps.extend(weights);
        let rg = self.rg(&deps);
        let saved = ChamferSaved { points, weights, target, fwd_nn, bwd_nn, weight_vals, term1 };
        Ok(self.push(Tensor::scalar(term1 + term2), Op::Chamfer(Box::new(saved)), rg))
    }

    // ---- reverse pass ----

    /// Back-propagates from a scalar `loss`, accumulating into leaf
    /// gradients. Intermediate adjoints are rebuilt on every call, so a
    /// second call adds the same contribution again unless grads are zeroed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            backprop_node(&self.nodes, node, &g, &mut adj);
        }
        Ok(())
    }
}

/// Accumulates into the adjoint of `v` when `v` needs one.
fn acc<F: FnOnce(&mut [f64])>(nodes: &[Node], adj: &mut [Option<Vec<f64>>], v: Var, f: F) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].value.numel();
    let slot = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).dims2().unwrap().1;
            acc(nodes, adj, *a, |ga| gemm(m, n, k, g, false, val(*b).data(), true, ga, 1.0));
            acc(nodes, adj, *b, |gb| gemm(k, m, n, val(*a).data(), true, g, false, gb, 1.0));
        }
        Op::Linear { x, w, b } => {
            let (m, k) = val(*x).dims2().unwrap();
            let n = val(*w).dims2().unwrap().1;
            acc(nodes, adj, *x, |gx| gemm(m, n, k, g, false, val(*w).data(), true, gx, 1.0));
            acc(nodes, adj, *w, |gw| gemm(k, m, n, val(*x).data(), true, g, false, gw, 1.0));
            if let Some(b) = b {
                acc(nodes, adj, *b, |gb| {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                });
            }
        }
        Op::Add(a, b) => {
            acc(nodes, adj, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            acc(nodes, adj, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d += s));
        }
        Op::Sub(a, b) => {
            acc(nodes, adj, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            acc(nodes, adj, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            acc(nodes, adj, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            acc(nodes, adj, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        Op::DivScalar(a, s) => {
            let d = val(*s).data()[0];
            acc(nodes, adj, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi / d));
            let dot: f64 = g.iter().zip(val(*a).data()).map(|(gi, ai)| gi * ai).sum();
            acc(nodes, adj, *s, |gs| gs[0] -= dot / (d * d));
        }
        Op::Scale(a, s) => acc(nodes, adj, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, x)| *d += s * x)),
        Op::AddRow(a, row) => {
            acc(nodes, adj, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            let c = val(*row).numel();
            acc(nodes, adj, *row, |gr| {
                for chunk in g.chunks_exact(c) {
                    gr.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                }
            });
        }
        Op::Relu(a) => {
            let av = val(*a).data();
            acc(nodes, adj, *a, |ga| {
                for i in 0..ga.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            });
        }
        Op::Elu(a) => {
            let av = val(*a).data();
            acc(nodes, adj, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * if av[i] > 0.0 { 1.0 } else { av[i].exp() };
                }
            });
        }
        Op::Reshape(a) => acc(nodes, adj, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s)),
        Op::ConcatCols(parts) => {
            let rows = node.value.dims2().unwrap().0;
            let total = node.value.dims2().unwrap().1;
            let mut off = 0;
            for p in parts {
                let c = val(*p).dims2().unwrap().1;
                acc(nodes, adj, *p, |gp| {
                    for r in 0..rows {
                        let src = &g[r * total + off..r * total + off + c];
                        gp[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                });
                off += c;
            }
        }
        Op::GatherRows(a, idx) => {
            let c = val(*a).dims2().unwrap().1;
            acc(nodes, adj, *a, |ga| {
                for (row, &i) in idx.iter().enumerate() {
                    ga[i * c..(i + 1) * c].iter_mut().zip(&g[row * c..(row + 1) * c]).for_each(|(d, s)| *d += s);
                }
            });
        }
        Op::SegmentSum(a, segs) => {
            let c = val(*a).dims2().unwrap().1;
            acc(nodes, adj, *a, |ga| {
                for grp in 0..segs.len() {
                    let src = &g[grp * c..(grp + 1) * c];
                    for &m in segs.group(grp) {
                        ga[m * c..(m + 1) * c].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            });
        }
        Op::GatherSum { parts, bias } => {
            let c = node.value.dims2().unwrap().1;
            for (v, idx) in parts {
                acc(nodes, adj, *v, |gv| {
                    for (row, &i) in idx.iter().enumerate() {
                        gv[i * c..(i + 1) * c].iter_mut().zip(&g[row * c..(row + 1) * c]).for_each(|(d, s)| *d += s);
                    }
                });
            }
            if let Some(b) = bias {
                acc(nodes, adj, *b, |gb| {
                    for row in g.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                });
            }
        }
        Op::Sum(a) => acc(nodes, adj, *a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
        Op::Conv3d { input, weight, bias, geom } => {
            let xin = val(*input).data();
            let w = val(*weight).data();
            if nodes[input.0].requires_grad {
                let gi = conv::backward_input(geom, w, g);
                acc(nodes, adj, *input, |ga| ga.iter_mut().zip(&gi).for_each(|(d, s)| *d += s));
            }
            acc(nodes, adj, *weight, |gw| conv::backward_weight(geom, xin, g, gw));
            if let Some(b) = bias {
                acc(nodes, adj, *b, |gb| conv::backward_bias(geom, g, gb));
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
            let c = inv_std.len();
            let n = xhat.len() / c.max(1);
            let gv = val(*gamma).data();
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for i in 0..n {
                for j in 0..c {
                    sum_dy[j] += g[i * c + j];
                    sum_dy_xhat[j] += g[i * c + j] * xhat[i * c + j];
                }
            }
            acc(nodes, adj, *gamma, |gg| gg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, s)| *d += s));
            acc(nodes, adj, *beta, |gb| gb.iter_mut().zip(&sum_dy).for_each(|(d, s)| *d += s));
            let nf = n as f64;
            acc(nodes, adj, *x, |gx| {
                for i in 0..n {
                    for j in 0..c {
                        let k = i * c + j;
                        gx[k] += gv[j] * inv_std[j] / nf * (nf * g[k] - sum_dy[j] - xhat[k] * sum_dy_xhat[j]);
                    }
                }
            });
        }
        Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
            let c = inv_std.len();
            let gv = val(*gamma).data();
            let xv = val(*x).data();
            acc(nodes, adj, *x, |gx| {
                for (k, d) in gx.iter_mut().enumerate() {
                    *d += g[k] * gv[k % c] * inv_std[k % c];
                }
            });
            acc(nodes, adj, *gamma, |gg| {
                for (k, gk) in g.iter().enumerate() {
                    let j = k % c;
                    gg[j] += gk * (xv[k] - mean[j]) * inv_std[j];
                }
            });
            acc(nodes, adj, *beta, |gb| {
                for (k, gk) in g.iter().enumerate() {
                    gb[k % c] += gk;
                }
            });
        }
        Op::Dropout { x, mask } => acc(nodes, adj, *x, |gx| {
            for i in 0..gx.len() {
                gx[i] += g[i] * mask[i];
            }
        }),
        Op::SoftmaxCe { logits, labels, weights, probs } => {
            let n = labels.len();
            let c = probs.len() / n.max(1);
            let wsum: f64 = weights.iter().sum();
            if wsum > 0.0 {
                acc(nodes, adj, *logits, |gl| {
                    for i in 0..n {
                        let s = g[0] * weights[i] / wsum;
                        for j in 0..c {
                            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                            gl[i * c + j] += s * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
        }
        Op::SoftmaxPick { logits, class, probs } => {
            let n = g.len();
            let c = probs.len() / n.max(1);
            acc(nodes, adj, *logits, |gl| {
                for i in 0..n {
                    let pc = probs[i * c + class];
                    for j in 0..c {
                        let delta = if j == *class { 1.0 } else { 0.0 };
                        gl[i * c + j] += g[i] * pc * (delta - probs[i * c + j]);
                    }
                }
            });
        }
        Op::L1 { x, target, norm } => {
            let xv = val(*x).data();
            acc(nodes, adj, *x, |gx| {
                for i in 0..gx.len() {
                    let d = xv[i] - target[i];
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gx[i] += g[0] * s / norm;
                }
            });
        }
        Op::Chamfer(saved) => chamfer_backward(nodes, saved, g[0], adj),
        Op::ChannelsLast { x, batch, channels, spatial } => acc(nodes, adj, *x, |gx| {
            for b in 0..*batch {
                for c in 0..*channels {
                    for s in 0..*spatial {
                        gx[(b * channels + c) * spatial + s] += g[(b * spatial + s) * channels + c];
                    }
                }
            }
        }),
    }
}

fn chamfer_backward(nodes: &[Node], s: &ChamferSaved, g0: f64, adj: &mut [Option<Vec<f64>>]) {
    let pv = nodes[s.points.0].value.data();
    let w = &s.weight_vals;
    let wsum: f64 = w.iter().sum();
    let b = s.target.len() as f64;
    let weighted = s.weights.is_some();
    acc(nodes, adj, s.points, |gp| {
        for (i, &(t, _)) in s.fwd_nn.iter().enumerate() {
            let q = s.target[t];
            let k = g0 * w[i] / wsum * 2.0;
            for d in 0..3 {
                gp[i * 3 + d] += k * (pv[i * 3 + d] - q[d]);
            }
        }
        for (t, &(i, _)) in s.bwd_nn.iter().enumerate() {
            let q = s.target[t];
            let wi = if weighted { w[i].max(CHAMFER_WEIGHT_FLOOR) } else { 1.0 };
            let k = g0 / (b * wi) * 2.0;
            for d in 0..3 {
                gp[i * 3 + d] += k * (pv[i * 3 + d] - q[d]);
            }
        }
    });
    if let Some(wv) = s.weights {
        acc(nodes, adj, wv, |gw| {
            for (i, &(_, d)) in s.fwd_nn.iter().enumerate() {
                gw[i] += g0 * (d - s.term1) / wsum;
            }
            for &(i, d) in &s.bwd_nn {
                if w[i] > CHAMFER_WEIGHT_FLOOR {
                    gw[i] -= g0 * d / (b * w[i] * w[i]);
                }
            }
        });
    }
}
