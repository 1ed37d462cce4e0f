//! Reverse-mode autodiff on a tape of op records.
//!
//! A [`Graph`] owns the tape. Every op validates shapes, computes its
//! forward result eagerly, and records the inputs/output handles needed to
//! run the chain rule later. Records are only kept for outputs reachable
//! from a gradient-requiring leaf, so passes over constant data cost no
//! tape space.
//!
//! All reductions use fixed summation orders, so results are bit-identical
//! across runs for identical inputs.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Epsilon folded into layer-norm variance.
pub const LN_EPS: f64 = 1e-5;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

// ---------------------------------------------------------------------------
// Raw kernels. Deterministic: fixed iteration order, no data-dependent
// reassociation. The 4-lane dot keeps instruction-level parallelism without
// changing order across runs.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut s3 = 0.0;
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        s0 += x[0] * y[0];
        s1 += x[1] * y[1];
        s2 += x[2] * y[2];
        s3 += x[3] * y[3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// C[m,n] = A[m,k] * B[k,n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * B[m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn transpose_kernel(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// Standard normal CDF via the exact error function.
fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unrolls conv windows into a [h_out*w_out, c_in*kh*kw] matrix,
/// zero-filling out-of-bounds taps.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let h_out = conv_out_extent(h, kh, stride, pad);
    let w_out = conv_out_extent(w, kw, stride, pad);
    let kcols = c_in * kh * kw;
    let mut cols = vec![0.0; h_out * w_out * kcols];
    for oh in 0..h_out {
        for ow in 0..w_out {
            let row = &mut cols[(oh * w_out + ow) * kcols..(oh * w_out + ow + 1) * kcols];
            for ci in 0..c_in {
                for ki in 0..kh {
                    let iy = (oh * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for kj in 0..kw {
                        let ix = (ow * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row[(ci * kh + ki) * kw + kj] = xrow[ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let h_out = conv_out_extent(h, kh, stride, pad);
    let w_out = conv_out_extent(w, kw, stride, pad);
    let kcols = c_in * kh * kw;
    let mut dx = vec![0.0; c_in * h * w];
    for oh in 0..h_out {
        for ow in 0..w_out {
            let row = &dcols[(oh * w_out + ow) * kcols..(oh * w_out + ow + 1) * kcols];
            for ci in 0..c_in {
                for ki in 0..kh {
                    let iy = (oh * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let ix = (ow * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ci * h + iy as usize) * w + ix as usize] += row[(ci * kh + ki) * kw + kj];
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Tape records.

enum Rec {
    Matmul { a: Tensor, b: Tensor, out: Tensor },
    Transpose { x: Tensor, out: Tensor },
    Add { a: Tensor, b: Tensor, out: Tensor },
    Scale { x: Tensor, c: f64, out: Tensor },
    Relu { x: Tensor, out: Tensor },
    Gelu { x: Tensor, out: Tensor },
    SoftmaxRows { x: Tensor, mask: Option<Vec<bool>>, out: Tensor },
    LayerNorm { x: Tensor, gamma: Tensor, beta: Tensor, out: Tensor },
    Conv2d { x: Tensor, w: Tensor, b: Tensor, stride: usize, pad: usize, out: Tensor },
    Linear { x: Tensor, w: Tensor, b: Tensor, out: Tensor },
    Embedding { table: Tensor, ids: Vec<usize>, out: Tensor },
    CrossEntropy { logits: Tensor, labels: Vec<usize>, out: Tensor },
    Sum { x: Tensor, out: Tensor },
    ConcatRows { parts: Vec<Tensor>, out: Tensor },
    ConcatCols { parts: Vec<Tensor>, out: Tensor },
    SliceRows { x: Tensor, start: usize, out: Tensor },
    SliceCols { x: Tensor, start: usize, out: Tensor },
    Reshape { x: Tensor, out: Tensor },
}

impl Rec {
    fn out(&self) -> &Tensor {
        match self {
            Rec::Matmul { out, .. }
            | Rec::Transpose { out, .. }
            | Rec::Add { out, .. }
            | Rec::Scale { out, .. }
            | Rec::Relu { out, .. }
            | Rec::Gelu { out, .. }
            | Rec::SoftmaxRows { out, .. }
            | Rec::LayerNorm { out, .. }
            | Rec::Conv2d { out, .. }
            | Rec::Linear { out, .. }
            | Rec::Embedding { out, .. }
            | Rec::CrossEntropy { out, .. }
            | Rec::Sum { out, .. }
            | Rec::ConcatRows { out, .. }
            | Rec::ConcatCols { out, .. }
            | Rec::SliceRows { out, .. }
            | Rec::SliceCols { out, .. }
            | Rec::Reshape { out, .. } => out,
        }
    }
}

/// Gradients keyed by tensor id, as produced by
/// [`Graph::compute_gradients`]. Pure data: applying them to parameters is a
/// separate, explicitly ordered step, which keeps multi-worker training
/// bit-deterministic.
pub struct Gradients {
    by_id: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.by_id.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Autodiff tape. Build one per forward pass.
pub struct Graph {
    recording: bool,
    records: Vec<Rec>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Shape { op, details: format!("expected a matrix, got shape {:?}", s) }),
    }
}

impl Graph {
    /// Recording tape for training and gradient checks.
    pub fn new() -> Self {
        Graph { recording: true, records: Vec::new() }
    }

    /// Non-recording tape: same forward math, no memory held for backward.
    pub fn inference() -> Self {
        Graph { recording: false, records: Vec::new() }
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    fn push(&mut self, rec: Rec) {
        if self.recording && rec.out().is_tracked() {
            self.records.push(rec);
        }
    }

    // -- ops ----------------------------------------------------------------

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = require_2d("matmul", a)?;
        let (k2, n) = require_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                details: format!("inner dims differ: {:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        let data = matmul_nn(&a.data(), &b.data(), m, k, n);
        let out = Tensor::result(vec![m, n], data, a.is_tracked() || b.is_tracked());
        self.push(Rec::Matmul { a: a.clone(), b: b.clone(), out: out.clone() });
        Ok(out)
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = require_2d("transpose", x)?;
        let data = transpose_kernel(&x.data(), m, n);
        let out = Tensor::result(vec![n, m], data, x.is_tracked());
        self.push(Rec::Transpose { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op: "add",
                details: format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        let out = Tensor::result(a.shape().to_vec(), data, a.is_tracked() || b.is_tracked());
        self.push(Rec::Add { a: a.clone(), b: b.clone(), out: out.clone() });
        Ok(out)
    }

    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = x.data().iter().map(|v| v * c).collect();
        let out = Tensor::result(x.shape().to_vec(), data, x.is_tracked());
        self.push(Rec::Scale { x: x.clone(), c, out: out.clone() });
        Ok(out)
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::result(x.shape().to_vec(), data, x.is_tracked());
        self.push(Rec::Relu { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    /// Exact GELU: `x * Phi(x)` with the true normal CDF, not the tanh fit.
    pub fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = x.data().iter().map(|&v| v * phi(v)).collect();
        let out = Tensor::result(x.shape().to_vec(), data, x.is_tracked());
        self.push(Rec::Gelu { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    /// Row-wise softmax with max subtraction. `mask[j] == false` excludes
    /// column `j` from every row; excluded outputs are exactly `0.0`.
    pub fn softmax_rows(&mut self, x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        let (m, n) = require_2d("softmax_rows", x)?;
        if let Some(mk) = mask {
            if mk.len() != n {
                return Err(Error::Shape {
                    op: "softmax_rows",
                    details: format!("mask length {} does not match {} columns", mk.len(), n),
                });
            }
            if !mk.iter().any(|&v| v) {
                return Err(Error::FullyMaskedRow { row: 0 });
            }
        }
        let xd = x.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let orow = &mut data[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if mask.map_or(true, |mk| mk[j]) && row[j] > mx {
                    mx = row[j];
                }
            }
            let mut sum = 0.0;
            for j in 0..n {
                if mask.map_or(true, |mk| mk[j]) {
                    let e = (row[j] - mx).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                if mask.map_or(true, |mk| mk[j]) {
                    orow[j] /= sum;
                }
            }
        }
        drop(xd);
        let out = Tensor::result(vec![m, n], data, x.is_tracked());
        self.push(Rec::SoftmaxRows { x: x.clone(), mask: mask.map(|m| m.to_vec()), out: out.clone() });
        Ok(out)
    }

    /// Row-wise layer norm with learned gain/bias; population variance,
    /// epsilon [`LN_EPS`] inside the square root.
    pub fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let (m, n) = require_2d("layer_norm", x)?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(Error::Shape {
                op: "layer_norm",
                details: format!(
                    "gamma {:?} / beta {:?} must both be [{}]",
                    gamma.shape(),
                    beta.shape(),
                    n
                ),
            });
        }
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let orow = &mut data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                orow[j] = gd[j] * ((row[j] - mean) * inv) + bd[j];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        let tracked = x.is_tracked() || gamma.is_tracked() || beta.is_tracked();
        let out = Tensor::result(vec![m, n], data, tracked);
        self.push(Rec::LayerNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// 2-D cross-correlation with zero padding.
    /// `x` is `[c_in, h, w]`, `w_t` is `[c_out, c_in, kh, kw]`, `b` is `[c_out]`.
    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w_t: &Tensor,
        b: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (c_in, h, w) = match x.shape() {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(Error::Shape {
                    op: "conv2d",
                    details: format!("input must be [c,h,w], got {:?}", s),
                })
            }
        };
        let (c_out, c_in2, kh, kw) = match w_t.shape() {
            [o, i, a, b] => (*o, *i, *a, *b),
            s => {
                return Err(Error::Shape {
                    op: "conv2d",
                    details: format!("weight must be [c_out,c_in,kh,kw], got {:?}", s),
                })
            }
        };
        if c_in != c_in2 || b.shape() != [c_out] {
            return Err(Error::Shape {
                op: "conv2d",
                details: format!(
                    "channels disagree: x {:?}, w {:?}, b {:?}",
                    x.shape(),
                    w_t.shape(),
                    b.shape()
                ),
            });
        }
        if stride == 0 {
            return Err(Error::Contract { op: "conv2d", msg: "stride must be positive".into() });
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape {
                op: "conv2d",
                details: format!("kernel {}x{} exceeds padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad),
            });
        }
        let h_out = conv_out_extent(h, kh, stride, pad);
        let w_out = conv_out_extent(w, kw, stride, pad);
        let kcols = c_in * kh * kw;
        let cols = im2col(&x.data(), c_in, h, w, kh, kw, stride, pad);
        let mut data = matmul_nt(&w_t.data(), &cols, c_out, kcols, h_out * w_out);
        let bd = b.data();
        for co in 0..c_out {
            let row = &mut data[co * h_out * w_out..(co + 1) * h_out * w_out];
            for v in row.iter_mut() {
                *v += bd[co];
            }
        }
        drop(bd);
        let tracked = x.is_tracked() || w_t.is_tracked() || b.is_tracked();
        let out = Tensor::result(vec![c_out, h_out, w_out], data, tracked);
        self.push(Rec::Conv2d {
            x: x.clone(),
            w: w_t.clone(),
            b: b.clone(),
            stride,
            pad,
            out: out.clone(),
        });
        Ok(out)
    }

    /// Affine map over the last axis: `y = x . w + b` with `w` of shape
    /// `[in, out]`. Leading axes of `x` are preserved.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (dim_in, dim_out) = require_2d("linear", w)?;
        if x.ndim() == 0 || *x.shape().last().unwrap() != dim_in {
            return Err(Error::Shape {
                op: "linear",
                details: format!("input {:?} does not end in {}", x.shape(), dim_in),
            });
        }
        if b.shape() != [dim_out] {
            return Err(Error::Shape {
                op: "linear",
                details: format!("bias {:?} must be [{}]", b.shape(), dim_out),
            });
        }
        let rows = x.numel() / dim_in;
        let mut data = matmul_nn(&x.data(), &w.data(), rows, dim_in, dim_out);
        let bd = b.data();
        for r in 0..rows {
            let orow = &mut data[r * dim_out..(r + 1) * dim_out];
            for (v, &bv) in orow.iter_mut().zip(bd.iter()) {
                *v += bv;
            }
        }
        drop(bd);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dim_out;
        let tracked = x.is_tracked() || w.is_tracked() || b.is_tracked();
        let out = Tensor::result(shape, data, tracked);
        self.push(Rec::Linear { x: x.clone(), w: w.clone(), b: b.clone(), out: out.clone() });
        Ok(out)
    }

    /// Gathers rows of `table` at `ids`; gradient scatter-adds back.
    pub fn embedding(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (vocab, dim) = require_2d("embedding", table)?;
        let td = table.data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IdOutOfRange { id, vocab });
            }
            data.extend_from_slice(&td[id * dim..(id + 1) * dim]);
        }
        drop(td);
        let out = Tensor::result(vec![ids.len(), dim], data, table.is_tracked());
        self.push(Rec::Embedding { table: table.clone(), ids: ids.to_vec(), out: out.clone() });
        Ok(out)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits`, computed via the log-sum-exp trick. Scalar output.
    pub fn cross_entropy(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (bsz, classes) = require_2d("cross_entropy", logits)?;
        if labels.len() != bsz {
            return Err(Error::Shape {
                op: "cross_entropy",
                details: format!("{} labels for {} rows", labels.len(), bsz),
            });
        }
        if bsz == 0 {
            return Err(Error::Contract { op: "cross_entropy", msg: "empty batch".into() });
        }
        let ld = logits.data();
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::IdOutOfRange { id: label, vocab: classes });
            }
            let row = &ld[i * classes..(i + 1) * classes];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        drop(ld);
        let out = Tensor::result(Vec::new(), vec![total / bsz as f64], logits.is_tracked());
        self.push(Rec::CrossEntropy {
            logits: logits.clone(),
            labels: labels.to_vec(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().sum();
        let out = Tensor::result(Vec::new(), vec![s], x.is_tracked());
        self.push(Rec::Sum { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    /// Vertically stacks matrices sharing a column count.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract { op: "concat_rows", msg: "no parts".into() });
        }
        let (_, n) = require_2d("concat_rows", &parts[0])?;
        let mut rows = 0;
        for p in parts {
            let (pm, pn) = require_2d("concat_rows", p)?;
            if pn != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    details: format!("column counts differ: {} vs {}", pn, n),
                });
            }
            rows += pm;
        }
        let mut data = Vec::with_capacity(rows * n);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let tracked = parts.iter().any(|p| p.is_tracked());
        let out = Tensor::result(vec![rows, n], data, tracked);
        self.push(Rec::ConcatRows { parts: parts.to_vec(), out: out.clone() });
        Ok(out)
    }

    /// Horizontally concatenates matrices sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract { op: "concat_cols", msg: "no parts".into() });
        }
        let (m, _) = require_2d("concat_cols", &parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let (pm, pn) = require_2d("concat_cols", p)?;
            if pm != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    details: format!("row counts differ: {} vs {}", pm, m),
                });
            }
            widths.push(pn);
            total += pn;
        }
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (p, &pn) in parts.iter().zip(&widths) {
            let pd = p.data();
            for i in 0..m {
                data[i * total + off..i * total + off + pn].copy_from_slice(&pd[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        let tracked = parts.iter().any(|p| p.is_tracked());
        let out = Tensor::result(vec![m, total], data, tracked);
        self.push(Rec::ConcatCols { parts: parts.to_vec(), out: out.clone() });
        Ok(out)
    }

    pub fn slice_rows(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = require_2d("slice_rows", x)?;
        if start + len > m {
            return Err(Error::Shape {
                op: "slice_rows",
                details: format!("rows {}..{} out of 0..{}", start, start + len, m),
            });
        }
        let data = x.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::result(vec![len, n], data, x.is_tracked());
        self.push(Rec::SliceRows { x: x.clone(), start, out: out.clone() });
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = require_2d("slice_cols", x)?;
        if start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                details: format!("cols {}..{} out of 0..{}", start, start + len, n),
            });
        }
        let xd = x.data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xd[i * n + start..i * n + start + len]);
        }
        drop(xd);
        let out = Tensor::result(vec![m, len], data, x.is_tracked());
        self.push(Rec::SliceCols { x: x.clone(), start, out: out.clone() });
        Ok(out)
    }

    /// Copying reshape; element count must match.
    pub fn reshape(&mut self, x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != x.numel() {
            return Err(Error::Shape {
                op: "reshape",
                details: format!("{:?} has {} elements, target {:?} wants {}", x.shape(), x.numel(), new_shape, n),
            });
        }
        let out = Tensor::result(new_shape.to_vec(), x.to_vec(), x.is_tracked());
        self.push(Rec::Reshape { x: x.clone(), out: out.clone() });
        Ok(out)
    }

    // -- backward -----------------------------------------------------------

    /// Runs the chain rule from `loss` back over the tape and returns the
    /// gradient of every tracked tensor. Does not touch any `.grad`
    /// accumulator; see [`Graph::backward`] for that.
    pub fn compute_gradients(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: loss.shape().to_vec() });
        }
        let mut by_id: HashMap<u64, Vec<f64>> = HashMap::new();
        by_id.insert(loss.id(), vec![1.0]);

        let add_into = |map: &mut HashMap<u64, Vec<f64>>, t: &Tensor, delta: Vec<f64>| {
            if !t.is_tracked() {
                return;
            }
            match map.get_mut(&t.id()) {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(&delta) {
                        *a += *d;
                    }
                }
                None => {
                    map.insert(t.id(), delta);
                }
            }
        };

        for rec in self.records.iter().rev() {
            let g_out = match by_id.get(&rec.out().id()) {
                Some(g) => g.clone(),
                None => continue,
            };
            match rec {
                Rec::Matmul { a, b, out } => {
                    let (m, n) = (out.shape()[0], out.shape()[1]);
                    let k = a.shape()[1];
                    if a.is_tracked() {
                        let da = matmul_nt(&g_out, &b.data(), m, n, k);
                        add_into(&mut by_id, a, da);
                    }
                    if b.is_tracked() {
                        let db = matmul_tn(&a.data(), &g_out, m, k, n);
                        add_into(&mut by_id, b, db);
                    }
                }
                Rec::Transpose { x, out } => {
                    let (n, m) = (out.shape()[0], out.shape()[1]);
                    add_into(&mut by_id, x, transpose_kernel(&g_out, n, m));
                }
                Rec::Add { a, b, .. } => {
                    add_into(&mut by_id, a, g_out.clone());
                    add_into(&mut by_id, b, g_out);
                }
                Rec::Scale { x, c, .. } => {
                    add_into(&mut by_id, x, g_out.iter().map(|g| g * c).collect());
                }
                Rec::Relu { x, .. } => {
                    let xd = x.data();
                    let dx = g_out
                        .iter()
                        .zip(xd.iter())
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    drop(xd);
                    add_into(&mut by_id, x, dx);
                }
                Rec::Gelu { x, .. } => {
                    let xd = x.data();
                    let dx = g_out
                        .iter()
                        .zip(xd.iter())
                        .map(|(&g, &v)| {
                            let pdf = (-0.5 * v * v).exp() * INV_SQRT_2PI;
                            g * (phi(v) + v * pdf)
                        })
                        .collect();
                    drop(xd);
                    add_into(&mut by_id, x, dx);
                }
                Rec::SoftmaxRows { x, mask, out } => {
                    let (m, n) = (out.shape()[0], out.shape()[1]);
                    let yd = out.data();
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let y = &yd[i * n..(i + 1) * n];
                        let g = &g_out[i * n..(i + 1) * n];
                        let mut inner = 0.0;
                        for j in 0..n {
                            if mask.as_ref().map_or(true, |mk| mk[j]) {
                                inner += g[j] * y[j];
                            }
                        }
                        let drow = &mut dx[i * n..(i + 1) * n];
                        for j in 0..n {
                            if mask.as_ref().map_or(true, |mk| mk[j]) {
                                drow[j] = y[j] * (g[j] - inner);
                            }
                        }
                    }
                    drop(yd);
                    add_into(&mut by_id, x, dx);
                }
                Rec::LayerNorm { x, gamma, beta, out } => {
                    let (m, n) = (out.shape()[0], out.shape()[1]);
                    let xd = x.data();
                    let gd = gamma.data();
                    let mut dx = vec![0.0; m * n];
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for i in 0..m {
                        let row = &xd[i * n..(i + 1) * n];
                        let g = &g_out[i * n..(i + 1) * n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        // xhat, then the fused layer-norm backward:
                        // dx = (w - mean(w) - xhat * mean(w . xhat)) / sigma, w = g * gamma
                        let mut mean_w = 0.0;
                        let mut mean_wx = 0.0;
                        for j in 0..n {
                            let xh = (row[j] - mean) * inv;
                            let wj = g[j] * gd[j];
                            mean_w += wj;
                            mean_wx += wj * xh;
                            dgamma[j] += g[j] * xh;
                            dbeta[j] += g[j];
                        }
                        mean_w /= n as f64;
                        mean_wx /= n as f64;
                        let drow = &mut dx[i * n..(i + 1) * n];
                        for j in 0..n {
                            let xh = (row[j] - mean) * inv;
                            drow[j] = (g[j] * gd[j] - mean_w - xh * mean_wx) * inv;
                        }
                    }
                    drop(xd);
                    drop(gd);
                    add_into(&mut by_id, x, dx);
                    add_into(&mut by_id, gamma, dgamma);
                    add_into(&mut by_id, beta, dbeta);
                }
                Rec::Conv2d { x, w, b, stride, pad, out } => {
                    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                    let hw = out.shape()[1] * out.shape()[2];
                    let kcols = c_in * kh * kw;
                    if b.is_tracked() {
                        let mut db = vec![0.0; c_out];
                        for co in 0..c_out {
                            db[co] = g_out[co * hw..(co + 1) * hw].iter().sum();
                        }
                        add_into(&mut by_id, b, db);
                    }
                    if w.is_tracked() || x.is_tracked() {
                        let cols = im2col(&x.data(), c_in, h, wd, kh, kw, *stride, *pad);
                        if w.is_tracked() {
                            let dw = matmul_nn(&g_out, &cols, c_out, hw, kcols);
                            add_into(&mut by_id, w, dw);
                        }
                        if x.is_tracked() {
                            let dcols = matmul_tn(&g_out, &w.data(), c_out, hw, kcols);
                            let dx = col2im(&dcols, c_in, h, wd, kh, kw, *stride, *pad);
                            add_into(&mut by_id, x, dx);
                        }
                    }
                }
                Rec::Linear { x, w, b, out } => {
                    let dim_in = w.shape()[0];
                    let dim_out = w.shape()[1];
                    let rows = out.numel() / dim_out;
                    if x.is_tracked() {
                        let dx = matmul_nt(&g_out, &w.data(), rows, dim_out, dim_in);
                        add_into(&mut by_id, x, dx);
                    }
                    if w.is_tracked() {
                        let dw = matmul_tn(&x.data(), &g_out, rows, dim_in, dim_out);
                        add_into(&mut by_id, w, dw);
                    }
                    if b.is_tracked() {
                        let mut db = vec![0.0; dim_out];
                        for r in 0..rows {
                            for (dv, &g) in db.iter_mut().zip(&g_out[r * dim_out..(r + 1) * dim_out]) {
                                *dv += g;
                            }
                        }
                        add_into(&mut by_id, b, db);
                    }
                }
                Rec::Embedding { table, ids, .. } => {
                    let dim = table.shape()[1];
                    let mut dt = vec![0.0; table.numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g_out[i * dim..(i + 1) * dim];
                        let dst = &mut dt[id * dim..(id + 1) * dim];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    add_into(&mut by_id, table, dt);
                }
                Rec::CrossEntropy { logits, labels, .. } => {
                    let (bsz, classes) = (logits.shape()[0], logits.shape()[1]);
                    let ld = logits.data();
                    let gscale = g_out[0] / bsz as f64;
                    let mut dl = vec![0.0; bsz * classes];
                    for (i, &label) in labels.iter().enumerate() {
                        let row = &ld[i * classes..(i + 1) * classes];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        let drow = &mut dl[i * classes..(i + 1) * classes];
                        for j in 0..classes {
                            let p = (row[j] - mx).exp() / denom;
                            drow[j] = gscale * (p - if j == label { 1.0 } else { 0.0 });
                        }
                    }
                    drop(ld);
                    add_into(&mut by_id, logits, dl);
                }
                Rec::Sum { x, .. } => {
                    add_into(&mut by_id, x, vec![g_out[0]; x.numel()]);
                }
                Rec::ConcatRows { parts, out } => {
                    let n = out.shape()[1];
                    let mut row = 0;
                    for p in parts {
                        let pm = p.shape()[0];
                        if p.is_tracked() {
                            let dp = g_out[row * n..(row + pm) * n].to_vec();
                            add_into(&mut by_id, p, dp);
                        }
                        row += pm;
                    }
                }
                Rec::ConcatCols { parts, out } => {
                    let m = out.shape()[0];
                    let total = out.shape()[1];
                    let mut off = 0;
                    for p in parts {
                        let pn = p.shape()[1];
                        if p.is_tracked() {
                            let mut dp = vec![0.0; m * pn];
                            for i in 0..m {
                                dp[i * pn..(i + 1) * pn]
                                    .copy_from_slice(&g_out[i * total + off..i * total + off + pn]);
                            }
                            add_into(&mut by_id, p, dp);
                        }
                        off += pn;
                    }
                }
                Rec::SliceRows { x, start, out } => {
                    let n = x.shape()[1];
                    let len = out.shape()[0];
                    let mut dx = vec![0.0; x.numel()];
                    dx[start * n..(start + len) * n].copy_from_slice(&g_out);
                    add_into(&mut by_id, x, dx);
                }
                Rec::SliceCols { x, start, out } => {
                    let (m, n) = (x.shape()[0], x.shape()[1]);
                    let len = out.shape()[1];
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        dx[i * n + start..i * n + start + len]
                            .copy_from_slice(&g_out[i * len..(i + 1) * len]);
                    }
                    add_into(&mut by_id, x, dx);
                }
                Rec::Reshape { x, .. } => {
                    add_into(&mut by_id, x, g_out);
                }
            }
        }
        Ok(Gradients { by_id })
    }

    /// Computes gradients and adds them into the `.grad` accumulator of
    /// every gradient-requiring leaf. Calling twice doubles the stored
    /// gradients; the optimizer is responsible for zeroing.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        let grads = self.compute_gradients(loss)?;
        let mut seen: HashMap<u64, Tensor> = HashMap::new();
        let mut note = |t: &Tensor| {
            if t.requires_grad() {
                seen.entry(t.id()).or_insert_with(|| t.clone());
            }
        };
        for rec in &self.records {
            match rec {
                Rec::Matmul { a, b, .. } | Rec::Add { a, b, .. } => {
                    note(a);
                    note(b);
                }
                Rec::Transpose { x, .. }
                | Rec::Scale { x, .. }
                | Rec::Relu { x, .. }
                | Rec::Gelu { x, .. }
                | Rec::SoftmaxRows { x, .. }
                | Rec::Sum { x, .. }
                | Rec::SliceRows { x, .. }
                | Rec::SliceCols { x, .. }
                | Rec::Reshape { x, .. } => note(x),
                Rec::LayerNorm { x, gamma, beta, .. } => {
                    note(x);
                    note(gamma);
                    note(beta);
                }
                Rec::Conv2d { x, w, b, .. } | Rec::Linear { x, w, b, .. } => {
                    note(x);
                    note(w);
                    note(b);
                }
                Rec::Embedding { table, .. } => note(table),
                Rec::CrossEntropy { logits, .. } => note(logits),
                Rec::ConcatRows { parts, .. } | Rec::ConcatCols { parts, .. } => {
                    for p in parts {
                        note(p);
                    }
                }
            }
        }
        if loss.requires_grad() {
            seen.entry(loss.id()).or_insert_with(|| loss.clone());
        }
        for t in seen.values() {
            if let Some(g) = grads.by_id.get(&t.id()) {
                t.accumulate_grad(g);
            }
        }
        Ok(())
    }
}
