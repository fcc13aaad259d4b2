//! 3-D convolution through im2col + GEMM.

use super::tensor::gemm;
use super::{AutodiffError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// Input spatial extent `[D, H, W]`.
    pub dims: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_dims: [usize; 3],
}

/// Output extent of one axis: `(n + 2·pad − kernel) / stride + 1`.
pub fn conv_out_len(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeom {
    pub fn infer(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let err = |detail: String| AutodiffError::Shape { op: "conv3d", detail };
        let &[batch, c_in, d, h, w] = input else {
            return Err(err(format!("input must be [B,C,D,H,W], got {:?}", input)));
        };
        let &[c_out, wc_in, k0, k1, k2] = weight else {
            return Err(err(format!("weight must be [Co,Ci,k,k,k], got {:?}", weight)));
        };
        if wc_in != c_in || k0 != k1 || k1 != k2 {
            return Err(err(format!("input {:?} vs weight {:?}", input, weight)));
        }
        let mut out_dims = [0; 3];
        for (o, n) in out_dims.iter_mut().zip([d, h, w]) {
            *o = conv_out_len(n, k0, stride, pad)
                .ok_or_else(|| err(format!("kernel {} stride {} pad {} on extent {}", k0, stride, pad, n)))?;
        }
        Ok(Self { batch, c_in, c_out, dims: [d, h, w], kernel: k0, stride, pad, out_dims })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.out_dims;
        vec![self.batch, self.c_out, d, h, w]
    }

    fn in_spatial(&self) -> usize {
        self.dims.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel.pow(3)
    }

    /// Calls `f(col_row, out_pos, in_index)` for every in-bounds tap.
    fn for_each_tap<F: FnMut(usize, usize, usize)>(&self, mut f: F) {
        let k = self.kernel;
        let [d, h, w] = self.dims;
        let [od, oh, ow] = self.out_dims;
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..self.c_in {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((ci * k + kz) * k + ky) * k + kx;
                        for oz in 0..od {
                            let z = oz as isize * s - p + kz as isize;
                            if z < 0 || z >= d as isize {
                                continue;
                            }
                            for oy in 0..oh {
                                let y = oy as isize * s - p + ky as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let x = ox as isize * s - p + kx as isize;
                                    if x < 0 || x >= w as isize {
                                        continue;
                                    }
                                    let pos = (oz * oh + oy) * ow + ox;
                                    let idx = ((ci * d + z as usize) * h + y as usize) * w + x as usize;
                                    f(row, pos, idx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, sample: &[f64], col: &mut [f64]) {
        let l = self.out_spatial();
        col.iter_mut().for_each(|v| *v = 0.0);
        self.for_each_tap(|row, pos, idx| col[row * l + pos] = sample[idx]);
    }

    fn col2im(&self, col: &[f64], sample: &mut [f64]) {
        let l = self.out_spatial();
        self.for_each_tap(|row, pos, idx| sample[idx] += col[row * l + pos]);
    }
}

pub(crate) fn forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (l, kr) = (g.out_spatial(), g.col_rows());
    let in_len = g.c_in * g.in_spatial();
    let out_len = g.c_out * l;
    let mut out = vec![0.0; g.batch * out_len];
    let mut col = vec![0.0; kr * l];
    for b in 0..g.batch {
        g.im2col(&input[b * in_len..(b + 1) * in_len], &mut col);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_exact_mut(l).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[co]);
            }
        }
        gemm(g.c_out, kr, l, weight, false, &col, false, dst, 1.0);
    }
    out
}

pub(crate) fn backward_input(g: &ConvGeom, weight: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (l, kr) = (g.out_spatial(), g.col_rows());
    let in_len = g.c_in * g.in_spatial();
    let out_len = g.c_out * l;
    let mut grad_in = vec![0.0; g.batch * in_len];
    let mut col = vec![0.0; kr * l];
    for b in 0..g.batch {
        gemm(kr, g.c_out, l, weight, true, &grad_out[b * out_len..(b + 1) * out_len], false, &mut col, 0.0);
        g.col2im(&col, &mut grad_in[b * in_len..(b + 1) * in_len]);
    }
    grad_in
}

pub(crate) fn backward_weight(g: &ConvGeom, input: &[f64], grad_out: &[f64], grad_w: &mut [f64]) {
    let (l, kr) = (g.out_spatial(), g.col_rows());
    let in_len = g.c_in * g.in_spatial();
    let out_len = g.c_out * l;
    let mut col = vec![0.0; kr * l];
    for b in 0..g.batch {
        g.im2col(&input[b * in_len..(b + 1) * in_len], &mut col);
        gemm(g.c_out, l, kr, &grad_out[b * out_len..(b + 1) * out_len], false, &col, true, grad_w, 1.0);
    }
}

pub(crate) fn backward_bias(g: &ConvGeom, grad_out: &[f64], grad_b: &mut [f64]) {
    let l = g.out_spatial();
    for chunk in grad_out.chunks_exact(g.c_out * l) {
        for (co, plane) in chunk.chunks_exact(l).enumerate() {
            grad_b[co] += plane.iter().sum::<f64>();
        }
    }
}
