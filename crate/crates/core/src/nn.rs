//! Layer primitives with hand-written backward passes.
//!
//! Activations are `[N, C, H, W]` tensors; dense activations are `[B, D]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in
/// `0..w`, as a half-open range.
fn valid_cols(g: ConvGeometry, kx: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(wo);
    // largest ox with ox * stride + kx <= w - 1 + pad
    let hi = if kx > w - 1 + g.pad { 0 } else { ((w - 1 + g.pad - kx) / g.stride + 1).min(wo) };
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    col: &mut [T],
) {
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    for ci in 0..channels {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut col[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_cols(g, kx, w, wo);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, s) in dst[lo..hi].iter_mut().zip(src[first..].chunks(g.stride)) {
                                *d = s[0];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    col: &[T],
    channels: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    dx: &mut [T],
) {
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    for ci in 0..channels {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_cols(g, kx, w, wo);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s = &src[oy * wo + lo..oy * wo + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + s.len()].iter_mut().zip(s) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst[first..].chunks_mut(g.stride).zip(s) {
                            d[0] += *v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(x: &Tensor<impl Scalar>, weight: &Tensor<impl Scalar>) -> Result<[usize; 5]> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
        return Err(Error::Shape(format!(
            "conv input {xs:?} incompatible with weight {ws:?}"
        )));
    }
    Ok([xs[0], xs[1], xs[2], xs[3], ws[0]])
}

/// Bias-free 2-D convolution.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, g: ConvGeometry) -> Result<Tensor<T>> {
    let [n, ci, h, w, co] = conv_dims(x, weight)?;
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let kk = ci * g.kernel * g.kernel;
    let mut y = Tensor::zeros(&[n, co, ho, wo]);
    let mut col = vec![T::zero(); kk * ho * wo];
    for s in 0..n {
        im2col(&x.data()[s * ci * h * w..(s + 1) * ci * h * w], ci, h, w, g, &mut col);
        let out = &mut y.data_mut()[s * co * ho * wo..(s + 1) * co * ho * wo];
        T::gemm(co, kk, ho * wo, T::one(), weight.data(), false, &col, false, T::zero(), out);
    }
    Ok(y)
}

/// Returns `(d_input, d_weight)`; `d_input` is skipped when not needed.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: ConvGeometry,
    dy: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let [n, ci, h, w, co] = conv_dims(x, weight)?;
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let kk = ci * g.kernel * g.kernel;
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    let mut col = vec![T::zero(); kk * ho * wo];
    let mut dcol = vec![T::zero(); kk * ho * wo];
    for s in 0..n {
        let dys = &dy.data()[s * co * ho * wo..(s + 1) * co * ho * wo];
        im2col(&x.data()[s * ci * h * w..(s + 1) * ci * h * w], ci, h, w, g, &mut col);
        T::gemm(co, ho * wo, kk, T::one(), dys, false, &col, true, T::one(), dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            T::gemm(kk, co, ho * wo, T::one(), weight.data(), true, dys, false, T::zero(), &mut dcol);
            col2im(&dcol, ci, h, w, g, &mut dx.data_mut()[s * ci * h * w..(s + 1) * ci * h * w]);
        }
    }
    Ok((dx, dw))
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    /// Per-channel `1/sqrt(var + eps)`.
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Per-channel batch statistics `(mean, biased variance)`.
fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (x.dim(0), x.dim(1));
    let hw = x.dim(2) * x.dim(3);
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().map(|v| v.f64()).sum::<f64>();
        }
        mean[ch] = s / m;
        let mut ss = 0.0;
        for i in 0..n {
            ss += x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                .iter()
                .map(|v| {
                    let d = v.f64() - mean[ch];
                    d * d
                })
                .sum::<f64>();
        }
        var[ch] = ss / m;
    }
    (mean, var)
}

pub struct BatchNormParams<'a, T> {
    pub gamma: &'a Tensor<T>,
    pub beta: &'a Tensor<T>,
    pub running_mean: &'a Tensor<T>,
    pub running_var: &'a Tensor<T>,
}

/// Batch normalization. With `batch_stats` the batch's own statistics are
/// used and updated running statistics are returned; otherwise the running
/// statistics normalize and the layer is a fixed affine map.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<'_, T>,
    batch_stats: bool,
) -> Result<(Tensor<T>, BatchNormCache<T>, Option<(Tensor<T>, Tensor<T>)>)> {
    if x.shape().len() != 4 || p.gamma.len() != x.dim(1) {
        return Err(Error::Shape(format!(
            "batch norm over {:?} with {} channels",
            x.shape(),
            p.gamma.len()
        )));
    }
    let (n, c) = (x.dim(0), x.dim(1));
    let hw = x.dim(2) * x.dim(3);
    let (mean, var, updated) = if batch_stats {
        let (mean, var) = channel_stats(x);
        let m = (n * hw) as f64;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let rm = Tensor::from_vec(
            &[c],
            (0..c)
                .map(|ch| T::of((1.0 - BN_MOMENTUM) * p.running_mean.data()[ch].f64() + BN_MOMENTUM * mean[ch]))
                .collect(),
        )?;
        let rv = Tensor::from_vec(
            &[c],
            (0..c)
                .map(|ch| {
                    T::of((1.0 - BN_MOMENTUM) * p.running_var.data()[ch].f64() + BN_MOMENTUM * var[ch] * unbias)
                })
                .collect(),
        )?;
        (mean, var, Some((rm, rv)))
    } else {
        (
            p.running_mean.data().iter().map(|v| v.f64()).collect(),
            p.running_var.data().iter().map(|v| v.f64()).collect(),
            None,
        )
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + BN_EPS).sqrt())).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            let (mu, is) = (T::of(mean[ch]), inv_std[ch]);
            let (gm, bt) = (p.gamma.data()[ch], p.beta.data()[ch]);
            for ((xh, yv), xv) in xhat.data_mut()[range.clone()]
                .iter_mut()
                .zip(y.data_mut()[range.clone()].iter_mut())
                .zip(&x.data()[range])
            {
                *xh = (*xv - mu) * is;
                *yv = gm * *xh + bt;
            }
        }
    }
    Ok((
        y,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats,
        },
        updated,
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c) = (dy.dim(0), dy.dim(1));
    let hw = dy.dim(2) * dy.dim(3);
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for (d, xh) in dy.data()[range.clone()].iter().zip(&cache.xhat.data()[range]) {
                dbeta[ch] += d.f64();
                dgamma[ch] += d.f64() * xh.f64();
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            let out = &mut dx.data_mut()[range.clone()];
            if cache.batch_stats {
                let (sb, sg) = (T::of(dbeta[ch] / m), T::of(dgamma[ch] / m));
                for ((o, d), xh) in out.iter_mut().zip(&dy.data()[range.clone()]).zip(&cache.xhat.data()[range]) {
                    *o = scale * (*d - sb - *xh * sg);
                }
            } else {
                for (o, d) in out.iter_mut().zip(&dy.data()[range]) {
                    *o = scale * *d;
                }
            }
        }
    }
    let to_t = |v: Vec<f64>| Tensor::from_vec(&[c], v.into_iter().map(T::of).collect()).expect("channel vector");
    (dx, to_t(dgamma), to_t(dbeta))
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (d, o) in dy.data_mut().iter_mut().zip(out.data()) {
        if *o <= T::zero() {
            *d = T::zero();
        }
    }
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c) = (x.dim(0), x.dim(1));
    let hw = x.dim(2) * x.dim(3);
    let data = x
        .data()
        .chunks(hw)
        .map(|plane| T::of(plane.iter().map(|v| v.f64()).sum::<f64>() / hw as f64))
        .collect();
    Tensor::from_vec(&[n, c], data).expect("pooled shape")
}

pub fn global_avg_pool_backward<T: Scalar>(d_pooled: &Tensor<T>, spatial: (usize, usize)) -> Tensor<T> {
    let (n, c) = (d_pooled.dim(0), d_pooled.dim(1));
    let hw = spatial.0 * spatial.1;
    let inv = T::of(1.0 / hw as f64);
    let mut dx = Tensor::zeros(&[n, c, spatial.0, spatial.1]);
    for (plane, d) in dx.data_mut().chunks_mut(hw).zip(d_pooled.data()) {
        plane.fill(*d * inv);
    }
    dx
}

/// `y = x W^T + b` with `x: [B, in]`, `W: [out, in]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, din) = (x.dim(0), x.dim(1));
    let dout = weight.dim(0);
    if weight.dim(1) != din || bias.len() != dout {
        return Err(Error::Shape(format!(
            "linear {:?} x {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    let mut y = Tensor::zeros(&[b, dout]);
    for row in y.data_mut().chunks_mut(dout) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(b, din, dout, T::one(), x.data(), false, weight.data(), true, T::one(), y.data_mut());
    Ok(y)
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, din) = (x.dim(0), x.dim(1));
    let dout = weight.dim(0);
    let mut dx = Tensor::zeros(&[b, din]);
    T::gemm(b, dout, din, T::one(), dy.data(), false, weight.data(), false, T::zero(), dx.data_mut());
    let mut dw = Tensor::zeros(&[dout, din]);
    T::gemm(dout, b, din, T::one(), dy.data(), true, x.data(), false, T::zero(), dw.data_mut());
    let mut db = Tensor::zeros(&[dout]);
    for row in dy.data().chunks(dout) {
        for (a, v) in db.data_mut().iter_mut().zip(row) {
            *a += *v;
        }
    }
    (dx, dw, db)
}

/// Row-wise L2 normalization; returns the normalized rows and their norms.
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let d = x.dim(1);
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.dim(0));
    for row in y.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt().max(1e-12);
        let inv = T::of(1.0 / n);
        for v in row.iter_mut() {
            *v *= inv;
        }
        norms.push(T::of(n));
    }
    (y, norms)
}

pub fn l2_normalize_rows_backward<T: Scalar>(y: &Tensor<T>, norms: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let d = y.dim(1);
    let mut dx = Tensor::zeros(y.shape());
    for (((o, yr), dr), n) in dx
        .data_mut()
        .chunks_mut(d)
        .zip(y.data().chunks(d))
        .zip(dy.data().chunks(d))
        .zip(norms)
    {
        let dot: T = yr.iter().zip(dr).map(|(a, b)| *a * *b).sum();
        for ((ov, yv), dv) in o.iter_mut().zip(yr).zip(dr) {
            *ov = (*dv - *yv * dot) / *n;
        }
    }
    dx
}

/// Numerically stable log-softmax of each row.
pub fn log_softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let c = logits.dim(1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = row.iter().map(|v| (*v - max).f64().exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v = *v - max - T::of(lse);
        }
    }
    out
}

/// Mean (optionally per-class weighted) cross-entropy over a batch and its
/// gradient with respect to the logits. The weighted sum is divided by the
/// batch size, not by the total weight.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<(f64, Tensor<T>)> {
    let (b, c) = (logits.dim(0), logits.dim(1));
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} rows", labels.len())));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("logits".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Shape(format!("label {bad} out of range for {c} classes")));
    }
    if class_weights.is_some_and(|w| w.len() < c) {
        return Err(Error::Shape("class weights do not cover all classes".into()));
    }
    let logp = log_softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    let inv_b = 1.0 / b as f64;
    for (i, &y) in labels.iter().enumerate() {
        let w = class_weights.map_or(1.0, |w| w[y]);
        loss -= w * logp.data()[i * c + y].f64();
        for k in 0..c {
            let p = logp.data()[i * c + k].f64().exp();
            let t = if k == y { 1.0 } else { 0.0 };
            grad.data_mut()[i * c + k] = T::of(w * (p - t) * inv_b);
        }
    }
    Ok((loss * inv_b, grad))
}

/// Index of the largest entry of each row, ties toward the smaller index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.dim(1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
