//! Layer kernels over row-major slices, plus tensor-level wrappers.
//!
//! Every kernel treats its input as `n` rows; convolution and pooling view
//! each row as a `C x H x W` image.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Floor applied to the true-class probability in cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// A contiguous run of rows forming one time sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn whole(len: usize) -> Vec<Segment> {
        vec![Segment { start: 0, len }]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
}

impl ConvGeom {
    pub fn validate(&self) -> Result<()> {
        if [self.in_c, self.in_h, self.in_w, self.out_c, self.kh, self.kw, self.sh, self.sw].contains(&0) {
            return Err(Error::Shape(format!("conv geometry has a zero dimension: {self:?}")));
        }
        if self.kh > self.in_h || self.kw > self.in_w {
            return Err(Error::Shape(format!(
                "kernel {}x{} larger than input {}x{}",
                self.kh, self.kw, self.in_h, self.in_w
            )));
        }
        Ok(())
    }
    pub fn out_h(&self) -> usize {
        (self.in_h - self.kh) / self.sh + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w - self.kw) / self.sw + 1
    }
    pub fn in_size(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }
    pub fn out_size(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }
    /// Length of one receptive-field patch.
    pub fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub ph: usize,
    pub pw: usize,
    pub sh: usize,
    pub sw: usize,
}

impl PoolGeom {
    pub fn validate(&self) -> Result<()> {
        if [self.c, self.in_h, self.in_w, self.ph, self.pw, self.sh, self.sw].contains(&0) {
            return Err(Error::Shape(format!("pool geometry has a zero dimension: {self:?}")));
        }
        if self.ph > self.in_h || self.pw > self.in_w {
            return Err(Error::Shape(format!(
                "pool window {}x{} exceeds input {}x{}",
                self.ph, self.pw, self.in_h, self.in_w
            )));
        }
        Ok(())
    }
    pub fn out_h(&self) -> usize {
        (self.in_h - self.ph) / self.sh + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w - self.pw) / self.sw + 1
    }
    pub fn in_size(&self) -> usize {
        self.c * self.in_h * self.in_w
    }
    pub fn out_size(&self) -> usize {
        self.c * self.out_h() * self.out_w()
    }
}

pub(crate) fn fc_fwd(x: &[f64], n: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * dout);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    gemm(n, din, dout, x, false, w, false, &mut y, 1.0);
    y
}

/// Accumulates into `dw`/`db`; returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fc_bwd(
    x: &[f64],
    n: usize,
    din: usize,
    w: &[f64],
    dout: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    need_dx: bool,
) -> Vec<f64> {
    gemm(din, n, dout, x, true, dy, false, dw, 1.0);
    for row in dy.chunks_exact(dout) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    if !need_dx {
        return Vec::new();
    }
    let mut dx = vec![0.0; n * din];
    gemm(n, dout, din, dy, false, w, true, &mut dx, 0.0);
    dx
}

/// Patch matrix of shape `patch x (n * out_h * out_w)`.
fn im2col(g: &ConvGeom, x: &[f64], n: usize) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let cols_n = n * p;
    let mut cols = vec![0.0; g.patch() * cols_n];
    for c in 0..g.in_c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let kidx = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[kidx * cols_n..(kidx + 1) * cols_n];
                for r in 0..n {
                    let img = &x[r * g.in_size() + c * g.in_h * g.in_w..];
                    for y in 0..oh {
                        let src_row = (y * g.sh + i) * g.in_w + j;
                        let base = r * p + y * ow;
                        for xo in 0..ow {
                            dst[base + xo] = img[src_row + xo * g.sw];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(g: &ConvGeom, dcols: &[f64], n: usize, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let cols_n = n * p;
    for c in 0..g.in_c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let kidx = (c * g.kh + i) * g.kw + j;
                let src = &dcols[kidx * cols_n..(kidx + 1) * cols_n];
                for r in 0..n {
                    let off = r * g.in_size() + c * g.in_h * g.in_w;
                    for y in 0..oh {
                        let dst_row = off + (y * g.sh + i) * g.in_w + j;
                        let base = r * p + y * ow;
                        for xo in 0..ow {
                            dx[dst_row + xo * g.sw] += src[base + xo];
                        }
                    }
                }
            }
        }
    }
}

/// Valid cross-correlation. `w` is `out_c x in_c x kh x kw`.
pub(crate) fn conv_fwd(g: &ConvGeom, x: &[f64], n: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let p = g.out_h() * g.out_w();
    let cols = im2col(g, x, n);
    let mut out = vec![0.0; g.out_c * n * p];
    gemm(g.out_c, g.patch(), n * p, w, false, &cols, false, &mut out, 0.0);
    let mut y = vec![0.0; n * g.out_size()];
    for oc in 0..g.out_c {
        let src = &out[oc * n * p..(oc + 1) * n * p];
        for r in 0..n {
            let dst = &mut y[r * g.out_size() + oc * p..r * g.out_size() + (oc + 1) * p];
            for (d, s) in dst.iter_mut().zip(&src[r * p..(r + 1) * p]) {
                *d = s + b[oc];
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_bwd(
    g: &ConvGeom,
    x: &[f64],
    n: usize,
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    need_dx: bool,
) -> Vec<f64> {
    let p = g.out_h() * g.out_w();
    let mut gm = vec![0.0; g.out_c * n * p];
    for r in 0..n {
        for oc in 0..g.out_c {
            let src = &dy[r * g.out_size() + oc * p..r * g.out_size() + (oc + 1) * p];
            gm[oc * n * p + r * p..oc * n * p + (r + 1) * p].copy_from_slice(src);
            db[oc] += src.iter().sum::<f64>();
        }
    }
    let cols = im2col(g, x, n);
    gemm(g.out_c, n * p, g.patch(), &gm, false, &cols, true, dw, 1.0);
    if !need_dx {
        return Vec::new();
    }
    let mut dcols = vec![0.0; g.patch() * n * p];
    gemm(g.patch(), g.out_c, n * p, w, true, &gm, false, &mut dcols, 0.0);
    let mut dx = vec![0.0; n * g.in_size()];
    col2im_add(g, &dcols, n, &mut dx);
    dx
}

/// Window maxima with the flat in-row index of each winner; ties go to the
/// lowest index.
pub(crate) fn pool_fwd(g: &PoolGeom, x: &[f64], n: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut y = Vec::with_capacity(n * g.out_size());
    let mut idx = Vec::with_capacity(n * g.out_size());
    for r in 0..n {
        let row = &x[r * g.in_size()..(r + 1) * g.in_size()];
        for c in 0..g.c {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for i in 0..g.ph {
                        for j in 0..g.pw {
                            let fi = c * g.in_h * g.in_w + (yo * g.sh + i) * g.in_w + xo * g.sw + j;
                            if row[fi] > best {
                                best = row[fi];
                                best_i = fi;
                            }
                        }
                    }
                    y.push(best);
                    idx.push(best_i as u32);
                }
            }
        }
    }
    (y, idx)
}

pub(crate) fn pool_bwd(g: &PoolGeom, n: usize, idx: &[u32], dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; n * g.in_size()];
    let os = g.out_size();
    for r in 0..n {
        for k in 0..os {
            dx[r * g.in_size() + idx[r * os + k] as usize] += dy[r * os + k];
        }
    }
    dx
}

/// Source row for each (row, offset) pair, clamped within the row's segment.
pub(crate) fn td_index(segments: &[Segment], offsets: &[i32]) -> Vec<usize> {
    let total: usize = segments.iter().map(|s| s.len).sum();
    let mut idx = Vec::with_capacity(total * offsets.len());
    for s in segments {
        let last = s.len as i64 - 1;
        for t in 0..s.len as i64 {
            for &o in offsets {
                idx.push(s.start + (t + o as i64).clamp(0, last) as usize);
            }
        }
    }
    idx
}

pub(crate) fn gather_rows(x: &[f64], d: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&x[i * d..(i + 1) * d]);
    }
    out
}

pub(crate) fn scatter_rows_add(src: &[f64], d: usize, idx: &[usize], dst: &mut [f64]) {
    for (k, &i) in idx.iter().enumerate() {
        for (a, b) in dst[i * d..(i + 1) * d].iter_mut().zip(&src[k * d..(k + 1) * d]) {
            *a += b;
        }
    }
}

/// `(sum_i |x_i|^p)^(1/p)` over contiguous groups.
pub(crate) fn pnorm_fwd(x: &[f64], group: usize, p: f64) -> Vec<f64> {
    x.chunks_exact(group)
        .map(|g| {
            if p == 2.0 {
                g.iter().map(|v| v * v).sum::<f64>().sqrt()
            } else {
                g.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
            }
        })
        .collect()
}

pub(crate) fn pnorm_bwd(x: &[f64], y: &[f64], dy: &[f64], group: usize, p: f64) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for (j, (&yj, &gj)) in y.iter().zip(dy).enumerate() {
        if yj <= 0.0 {
            continue;
        }
        let denom = if p == 2.0 { yj } else { yj.powf(p - 1.0) };
        for i in j * group..(j + 1) * group {
            let xi = x[i];
            let num = if p == 2.0 {
                xi
            } else {
                xi.signum() * xi.abs().powf(p - 1.0)
            };
            dx[i] = gj * num / denom;
        }
    }
    dx
}

pub(crate) fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = y.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v - m).exp();
            sum += e;
            y.push(e);
        }
        for v in &mut y[start..] {
            *v /= sum;
        }
    }
    y
}

pub(crate) fn softmax_bwd(y: &[f64], dy: &[f64], k: usize) -> Vec<f64> {
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks_exact(k).zip(dy.chunks_exact(k)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(a, b)| a * (b - dot)));
    }
    dx
}

/// Norm below which a row is replaced by the first unit vector.
pub const LENGTH_NORM_EPS: f64 = 1e-8;

pub(crate) fn length_norm_rows(x: &[f64], d: usize) -> (Vec<f64>, usize) {
    let mut y = Vec::with_capacity(x.len());
    let mut degenerate = 0;
    for row in x.chunks_exact(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < LENGTH_NORM_EPS {
            degenerate += 1;
            y.push(1.0);
            y.extend(std::iter::repeat_n(0.0, d - 1));
        } else {
            y.extend(row.iter().map(|v| v / norm));
        }
    }
    (y, degenerate)
}

pub(crate) fn length_norm_bwd(x: &[f64], y: &[f64], dy: &[f64], d: usize) -> Vec<f64> {
    let mut dx = Vec::with_capacity(x.len());
    for ((xr, yr), gr) in x.chunks_exact(d).zip(y.chunks_exact(d)).zip(dy.chunks_exact(d)) {
        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < LENGTH_NORM_EPS {
            dx.extend(std::iter::repeat_n(0.0, d));
            continue;
        }
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(a, b)| (b - a * dot) / norm));
    }
    dx
}

/// Mean cross-entropy over labelled rows; unlabelled rows get zero gradient.
/// The gradient is with respect to the softmax logits.
pub(crate) fn ce_masked(probs: &[f64], k: usize, labels: &[Option<usize>]) -> (f64, Vec<f64>) {
    let count = labels.iter().filter(|l| l.is_some()).count().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for (r, label) in labels.iter().enumerate() {
        let Some(c) = *label else { continue };
        let row = &probs[r * k..(r + 1) * k];
        loss -= row[c].max(PROB_FLOOR).ln();
        for (g, p) in grad[r * k..(r + 1) * k].iter_mut().zip(row) {
            *g = p / count;
        }
        grad[r * k + c] -= 1.0 / count;
    }
    (loss / count, grad)
}

/// Mean squared error over rows with `mask[r]` set.
pub(crate) fn mse_masked(pred: &[f64], target: &[f64], d: usize, mask: &[bool]) -> (f64, Vec<f64>) {
    let rows = mask.iter().filter(|m| **m).count();
    let numel = (rows * d).max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (r, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for i in r * d..(r + 1) * d {
            let diff = pred[i] - target[i];
            loss += diff * diff;
            grad[i] = 2.0 * diff / numel;
        }
    }
    (loss / numel, grad)
}

// ---------------------------------------------------------------------------
// Tensor-level operations
// ---------------------------------------------------------------------------

fn expect_shape(t: &Tensor, want: &[usize], what: &str) -> Result<()> {
    if t.shape() != want {
        return Err(Error::Shape(format!("{what}: expected {want:?}, got {:?}", t.shape())));
    }
    Ok(())
}

/// `y = x W + b` for `x: B x Din`, `W: Din x Dout`, `b: Dout`.
pub fn fc_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, din) = x.dims2()?;
    let (wi, dout) = w.dims2()?;
    if wi != din {
        return Err(Error::Shape(format!("input width {din} != weight rows {wi}")));
    }
    expect_shape(b, &[dout], "bias")?;
    Tensor::matrix(n, dout, fc_fwd(x.data(), n, din, w.data(), b.data(), dout))
}

/// Valid 2-D cross-correlation of `x: B x C x H x W` with
/// `kernels: C' x C x kh x kw`.
pub fn conv2d_forward(x: &Tensor, kernels: &Tensor, bias: &Tensor, stride: (usize, usize)) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::Shape(format!("conv input must be 4-D, got {:?}", x.shape())));
    };
    let &[oc, kc, kh, kw] = kernels.shape() else {
        return Err(Error::Shape(format!("kernels must be 4-D, got {:?}", kernels.shape())));
    };
    if kc != c {
        return Err(Error::Shape(format!("kernel channels {kc} != input channels {c}")));
    }
    expect_shape(bias, &[oc], "conv bias")?;
    let g = ConvGeom {
        in_c: c,
        in_h: h,
        in_w: w,
        out_c: oc,
        kh,
        kw,
        sh: stride.0,
        sw: stride.1,
    };
    g.validate()?;
    Tensor::new(
        vec![n, oc, g.out_h(), g.out_w()],
        conv_fwd(&g, x.data(), n, kernels.data(), bias.data()),
    )
}

/// Max pooling over `B x C x H x W`; also returns the flat per-sample index
/// of each maximum.
pub fn maxpool2d_forward(x: &Tensor, pool: (usize, usize), stride: (usize, usize)) -> Result<(Tensor, Vec<u32>)> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::Shape(format!("pool input must be 4-D, got {:?}", x.shape())));
    };
    let g = PoolGeom {
        c,
        in_h: h,
        in_w: w,
        ph: pool.0,
        pw: pool.1,
        sh: stride.0,
        sw: stride.1,
    };
    g.validate()?;
    let (y, idx) = pool_fwd(&g, x.data(), n);
    Ok((Tensor::new(vec![n, c, g.out_h(), g.out_w()], y)?, idx))
}

/// Row `t` of the output is the affine map of the concatenation of
/// `x[clamp(t + o)]` over `offsets`.
pub fn timedelay_forward(x: &Tensor, offsets: &[i32], w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if offsets.is_empty() {
        return Err(Error::Invalid("time-delay layer needs at least one offset".into()));
    }
    let (t, d) = x.dims2()?;
    let (wi, dout) = w.dims2()?;
    if wi != d * offsets.len() {
        return Err(Error::Shape(format!(
            "time-delay weight rows {wi} != {d} x {} offsets",
            offsets.len()
        )));
    }
    expect_shape(b, &[dout], "time-delay bias")?;
    let idx = td_index(&Segment::whole(t), offsets);
    let spliced = gather_rows(x.data(), d, &idx);
    Tensor::matrix(t, dout, fc_fwd(&spliced, t, d * offsets.len(), w.data(), b.data(), dout))
}

pub fn pnorm_forward(x: &Tensor, group: usize, p: f64) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if group == 0 || d % group != 0 {
        return Err(Error::Shape(format!("p-norm input width {d} not divisible by group {group}")));
    }
    if !(p >= 1.0) {
        return Err(Error::Invalid(format!("p-norm exponent must be >= 1, got {p}")));
    }
    Tensor::matrix(n, d / group, pnorm_fwd(x.data(), group, p))
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Row-wise softmax with max subtraction.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let (_, k) = x.dims2()?;
    Tensor::new(x.shape().to_vec(), softmax_rows(x.data(), k))
}

/// Mean negative log-likelihood of `labels` under row distributions `probs`,
/// and its gradient with respect to the logits that produced them.
pub fn cross_entropy_loss(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = probs.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
    }
    let labels: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    let (loss, grad) = ce_masked(probs.data(), k, &labels);
    Ok((loss, Tensor::new(probs.shape().to_vec(), grad)?))
}

/// Mean squared elementwise error and its gradient `2 (pred - target) / numel`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len();
    let (loss, grad) = mse_masked(pred.data(), target.data(), n, &[true]);
    Ok((loss, Tensor::new(pred.shape().to_vec(), grad)?))
}
