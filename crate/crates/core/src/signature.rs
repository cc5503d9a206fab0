//! Truncated signatures of piecewise-linear paths.
//!
//! Coefficients are stored without the constant level-0 term. Layout is
//! level-major: the `d` level-1 coefficients, then the `d²` level-2
//! coefficients in lexicographic multi-index order, and so on up to the
//! truncation order. A path of `L` points is folded segment by segment with
//! Chen's relation, so both the whole-path and the per-prefix (stream)
//! transforms cost `O(L)` tensor-algebra products.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of stored coefficients, `d + d² + … + d^order`.
pub fn sig_dim(d: usize, order: usize) -> Result<usize> {
    if d == 0 || order == 0 {
        return Err(Error::Contract(format!(
            "sig_dim needs d >= 1 and order >= 1, got ({d}, {order})"
        )));
    }
    let overflow = || Error::Overflow(format!("sig_dim({d}, {order})"));
    let mut total: usize = 0;
    let mut power: usize = 1;
    for _ in 0..order {
        power = power.checked_mul(d).ok_or_else(overflow)?;
        total = total.checked_add(power).ok_or_else(overflow)?;
    }
    Ok(total)
}

/// `(offset, len)` of each level block, index 0 is level 1.
pub(crate) fn level_blocks(d: usize, order: usize) -> Vec<(usize, usize)> {
    let mut blocks = Vec::with_capacity(order);
    let mut offset = 0;
    let mut len = 1;
    for _ in 0..order {
        len *= d;
        blocks.push((offset, len));
        offset += len;
    }
    blocks
}

/// One-based multi-index labels for every coefficient, e.g. `S_1_2`.
pub fn coefficient_labels(d: usize, order: usize) -> Vec<String> {
    let mut labels = Vec::new();
    for k in 1..=order {
        let mut idx = vec![0usize; k];
        loop {
            let parts: Vec<String> = idx.iter().map(|i| (i + 1).to_string()).collect();
            labels.push(format!("S_{}", parts.join("_")));
            // odometer increment, last index fastest
            let mut pos = k;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < d {
                    break;
                }
                idx[pos] = 0;
            }
            if idx.iter().all(|&i| i == 0) {
                break;
            }
        }
    }
    labels
}

/// A sequence of `L >= 1` points in `R^d`, linearly interpolated with unit time steps.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseLinearPath {
    points: Tensor,
}

impl PiecewiseLinearPath {
    pub fn new(points: Tensor) -> Result<Self> {
        if points.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "path points must be L×d, got shape {:?}",
                points.shape()
            )));
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn point(&self, t: usize) -> &[f64] {
        self.points.row(t)
    }

    pub fn increment(&self, t: usize) -> Vec<f64> {
        let (a, b) = (self.point(t - 1), self.point(t));
        b.iter().zip(a).map(|(y, x)| y - x).collect()
    }
}

/// Signature coefficients of levels `1..=order` of a `channels`-dimensional path.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedSignature {
    channels: usize,
    order: usize,
    coeffs: Vec<f64>,
}

impl TruncatedSignature {
    /// The signature of a constant path: every stored coefficient is zero.
    pub fn trivial(channels: usize, order: usize) -> Result<Self> {
        let n = sig_dim(channels, order)?;
        Ok(Self {
            channels,
            order,
            coeffs: vec![0.0; n],
        })
    }

    pub fn from_coeffs(channels: usize, order: usize, coeffs: Vec<f64>) -> Result<Self> {
        let n = sig_dim(channels, order)?;
        if coeffs.len() != n {
            return Err(Error::dim("TruncatedSignature", &[n], &[coeffs.len()]));
        }
        Ok(Self {
            channels,
            order,
            coeffs,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Level-`k` block (`1 <= k <= order`), `d^k` entries.
    pub fn level(&self, k: usize) -> &[f64] {
        assert!(k >= 1 && k <= self.order, "level {k} outside 1..={}", self.order);
        let (off, len) = level_blocks(self.channels, self.order)[k - 1];
        &self.coeffs[off..off + len]
    }

    /// Coefficient for a zero-based multi-index.
    pub fn get(&self, index: &[usize]) -> f64 {
        let flat = index.iter().fold(0, |acc, &i| acc * self.channels + i);
        self.level(index.len())[flat]
    }
}

/// `exp(delta)` truncated: level `k` is `delta^{⊗k} / k!`.
pub(crate) fn segment_exp(delta: &[f64], order: usize, out: &mut [f64]) {
    let d = delta.len();
    let blocks = level_blocks(d, order);
    out[..d].copy_from_slice(delta);
    for k in 2..=order {
        let (prev_off, prev_len) = blocks[k - 2];
        let (off, _) = blocks[k - 1];
        let inv_k = 1.0 / k as f64;
        for p in 0..prev_len {
            let base = out[prev_off + p] * inv_k;
            for (m, &dm) in delta.iter().enumerate() {
                out[off + p * d + m] = base * dm;
            }
        }
    }
}

/// Backward of [`segment_exp`]: accumulates into `g_delta`. `g_exp` is consumed as scratch.
pub(crate) fn segment_exp_backward(
    delta: &[f64],
    exp: &[f64],
    order: usize,
    g_exp: &mut [f64],
    g_delta: &mut [f64],
) {
    let d = delta.len();
    let blocks = level_blocks(d, order);
    for k in (2..=order).rev() {
        let (prev_off, prev_len) = blocks[k - 2];
        let (off, _) = blocks[k - 1];
        let inv_k = 1.0 / k as f64;
        for p in 0..prev_len {
            let mut acc_prev = 0.0;
            let prev = exp[prev_off + p];
            for m in 0..d {
                let g = g_exp[off + p * d + m] * inv_k;
                acc_prev += g * delta[m];
                g_delta[m] += g * prev;
            }
            g_exp[prev_off + p] += acc_prev;
        }
    }
    for m in 0..d {
        g_delta[m] += g_exp[m];
    }
}

/// Truncated tensor product with implicit level-0 ones.
pub(crate) fn mul_raw(a: &[f64], b: &[f64], d: usize, order: usize, out: &mut [f64]) {
    let blocks = level_blocks(d, order);
    for k in 1..=order {
        let (off_k, len_k) = blocks[k - 1];
        for idx in 0..len_k {
            out[off_k + idx] = a[off_k + idx] + b[off_k + idx];
        }
        for i in 1..k {
            let j = k - i;
            let (off_i, len_i) = blocks[i - 1];
            let (off_j, len_j) = blocks[j - 1];
            for p in 0..len_i {
                let av = a[off_i + p];
                if av == 0.0 {
                    continue;
                }
                let dst = &mut out[off_k + p * len_j..off_k + (p + 1) * len_j];
                for (o, &bv) in dst.iter_mut().zip(&b[off_j..off_j + len_j]) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Backward of [`mul_raw`]; accumulates into `ga` and `gb`.
pub(crate) fn mul_backward(
    a: &[f64],
    b: &[f64],
    gc: &[f64],
    d: usize,
    order: usize,
    ga: &mut [f64],
    gb: &mut [f64],
) {
    let blocks = level_blocks(d, order);
    for k in 1..=order {
        let (off_k, len_k) = blocks[k - 1];
        for idx in 0..len_k {
            ga[off_k + idx] += gc[off_k + idx];
            gb[off_k + idx] += gc[off_k + idx];
        }
        for i in 1..k {
            let j = k - i;
            let (off_i, len_i) = blocks[i - 1];
            let (off_j, len_j) = blocks[j - 1];
            for p in 0..len_i {
                let av = a[off_i + p];
                let gsl = &gc[off_k + p * len_j..off_k + (p + 1) * len_j];
                let mut acc = 0.0;
                for q in 0..len_j {
                    acc += gsl[q] * b[off_j + q];
                    gb[off_j + q] += gsl[q] * av;
                }
                ga[off_i + p] += acc;
            }
        }
    }
}

/// Signature of the single linear segment with increment `delta`.
pub fn segment_signature(delta: &[f64], order: usize) -> Result<TruncatedSignature> {
    let n = sig_dim(delta.len(), order)?;
    let mut coeffs = vec![0.0; n];
    segment_exp(delta, order, &mut coeffs);
    TruncatedSignature::from_coeffs(delta.len(), order, coeffs)
}

/// Chen product: the signature of path `a` followed by path `b`.
pub fn chen_product(a: &TruncatedSignature, b: &TruncatedSignature) -> Result<TruncatedSignature> {
    if a.channels != b.channels || a.order != b.order {
        return Err(Error::Contract(format!(
            "chen_product operands disagree: (d={}, N={}) vs (d={}, N={})",
            a.channels, a.order, b.channels, b.order
        )));
    }
    let mut out = vec![0.0; a.coeffs.len()];
    mul_raw(&a.coeffs, &b.coeffs, a.channels, a.order, &mut out);
    TruncatedSignature::from_coeffs(a.channels, a.order, out)
}

/// Prefix signatures `S(points[0..=t])` for every `t`, flat `L × sig_dim`.
pub(crate) fn stream_raw(points: &[f64], len: usize, d: usize, order: usize) -> Vec<f64> {
    let n = sig_dim(d, order).expect("validated dims");
    let mut out = vec![0.0; len * n];
    let mut seg = vec![0.0; n];
    let mut delta = vec![0.0; d];
    for t in 1..len {
        for m in 0..d {
            delta[m] = points[t * d + m] - points[(t - 1) * d + m];
        }
        segment_exp(&delta, order, &mut seg);
        let (done, rest) = out.split_at_mut(t * n);
        mul_raw(&done[(t - 1) * n..], &seg, d, order, &mut rest[..n]);
    }
    out
}

/// Gradient of `Σ_t <upstream[t], prefix_sig[t]>` with respect to the path points.
///
/// `prefixes` are the forward prefix signatures from [`stream_raw`]. When
/// `upstream` has a single row it is applied to the last prefix only (whole-path mode).
pub(crate) fn stream_backward_raw(
    points: &[f64],
    prefixes: &[f64],
    upstream: &[f64],
    len: usize,
    d: usize,
    order: usize,
    stream: bool,
) -> Vec<f64> {
    let n = sig_dim(d, order).expect("validated dims");
    let mut g_points = vec![0.0; len * d];
    if len == 1 {
        return g_points;
    }
    let up_row = |t: usize| -> Option<&[f64]> {
        if stream {
            Some(&upstream[t * n..(t + 1) * n])
        } else if t == len - 1 {
            Some(&upstream[..n])
        } else {
            None
        }
    };
    let mut g_s = up_row(len - 1).unwrap().to_vec();
    let mut seg = vec![0.0; n];
    let mut g_seg = vec![0.0; n];
    let mut g_prev = vec![0.0; n];
    let mut delta = vec![0.0; d];
    let mut g_delta = vec![0.0; d];
    for t in (1..len).rev() {
        for m in 0..d {
            delta[m] = points[t * d + m] - points[(t - 1) * d + m];
        }
        segment_exp(&delta, order, &mut seg);
        g_seg.iter_mut().for_each(|v| *v = 0.0);
        g_prev.iter_mut().for_each(|v| *v = 0.0);
        let prev = &prefixes[(t - 1) * n..t * n];
        mul_backward(prev, &seg, &g_s, d, order, &mut g_prev, &mut g_seg);
        g_delta.iter_mut().for_each(|v| *v = 0.0);
        segment_exp_backward(&delta, &seg, order, &mut g_seg, &mut g_delta);
        for m in 0..d {
            g_points[t * d + m] += g_delta[m];
            g_points[(t - 1) * d + m] -= g_delta[m];
        }
        if let Some(up) = up_row(t - 1) {
            for (g, u) in g_prev.iter_mut().zip(up) {
                *g += u;
            }
        }
        std::mem::swap(&mut g_s, &mut g_prev);
    }
    g_points
}

/// Whole-path truncated signature; a single point yields the trivial signature.
pub fn signature(path: &PiecewiseLinearPath, order: usize) -> Result<TruncatedSignature> {
    let d = path.channels();
    let n = sig_dim(d, order)?;
    let mut acc = TruncatedSignature::trivial(d, order)?;
    let mut seg = vec![0.0; n];
    let mut next = vec![0.0; n];
    for t in 1..path.len() {
        segment_exp(&path.increment(t), order, &mut seg);
        mul_raw(&acc.coeffs, &seg, d, order, &mut next);
        std::mem::swap(&mut acc.coeffs, &mut next);
    }
    Ok(acc)
}

/// Signature of every prefix as an `L × sig_dim` tensor; row 0 is zero.
pub fn stream_signature(path: &PiecewiseLinearPath, order: usize) -> Result<Tensor> {
    let (len, d) = (path.len(), path.channels());
    let n = sig_dim(d, order)?;
    Tensor::matrix(len, n, stream_raw(path.points().data(), len, d, order))
}

/// Gradient of `<upstream, signature output>` with respect to every path point.
///
/// `upstream` shaped `[sig_dim]` or `[1, sig_dim]` differentiates the
/// whole-path signature; `[L, sig_dim]` differentiates the stream output.
pub fn signature_backward(
    path: &PiecewiseLinearPath,
    order: usize,
    upstream: &Tensor,
) -> Result<Tensor> {
    let (len, d) = (path.len(), path.channels());
    let n = sig_dim(d, order)?;
    let stream = match upstream.shape() {
        [m] if *m == n => false,
        [1, m] if *m == n && len > 1 => false,
        [l, m] if *l == len && *m == n => true,
        s => return Err(Error::dim("signature_backward", s, &[len, n])),
    };
    let prefixes = stream_raw(path.points().data(), len, d, order);
    let g = stream_backward_raw(
        path.points().data(),
        &prefixes,
        upstream.data(),
        len,
        d,
        order,
        stream,
    );
    Tensor::matrix(len, d, g)
}
