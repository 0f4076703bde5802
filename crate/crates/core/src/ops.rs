//! Layer-level forward and backward kernels with multiply-accumulate accounting.
//!
//! The weight-gradient kernels honor a [`RowMask`]: rows whose mask bit is
//! false are left at exactly zero and their multiply-accumulates are neither
//! executed nor counted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{col2im, gemm_nn, gemm_tn, im2col, transpose, ConvGeometry};
use crate::tensor::Tensor;

/// Output-channel selection for one layer. `true` marks an unfrozen row whose
/// weight gradient is computed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMask {
    pub layer: usize,
    keep: Vec<bool>,
}

impl RowMask {
    pub fn new(layer: usize, keep: Vec<bool>) -> Self {
        Self { layer, keep }
    }

    pub fn all(layer: usize, rows: usize) -> Self {
        Self::new(layer, vec![true; rows])
    }

    pub fn none(layer: usize, rows: usize) -> Self {
        Self::new(layer, vec![false; rows])
    }

    pub fn from_indices(layer: usize, rows: usize, unfrozen: &[usize]) -> Self {
        let mut keep = vec![false; rows];
        for &i in unfrozen {
            keep[i] = true;
        }
        Self::new(layer, keep)
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn is_unfrozen(&self, row: usize) -> bool {
        self.keep[row]
    }

    pub fn bits(&self) -> &[bool] {
        &self.keep
    }

    pub fn unfrozen_rows(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    fn check(&self, rows: usize) -> Result<()> {
        if self.keep.len() != rows {
            return Err(Error::Config(format!(
                "row mask for layer {} has {} entries, layer has {rows} output channels",
                self.layer,
                self.keep.len()
            )));
        }
        Ok(())
    }
}

/// Multiply-accumulate totals for one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub forward: u64,
    pub input_grad: u64,
    pub weight_grad: u64,
}

impl LayerMacs {
    pub fn backward(&self) -> u64 {
        self.input_grad + self.weight_grad
    }

    fn add(&mut self, other: &LayerMacs) {
        self.forward += other.forward;
        self.input_grad += other.input_grad;
        self.weight_grad += other.weight_grad;
    }
}

/// Live MAC counters keyed by layer index. Matmuls without a layer tag are
/// pooled under `untagged`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    layers: BTreeMap<usize, LayerMacs>,
    untagged: LayerMacs,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entry(&mut self, layer: Option<usize>) -> &mut LayerMacs {
        match layer {
            Some(id) => self.layers.entry(id).or_default(),
            None => &mut self.untagged,
        }
    }

    pub fn layer(&self, id: usize) -> LayerMacs {
        self.layers.get(&id).copied().unwrap_or_default()
    }

    pub fn layers(&self) -> impl Iterator<Item = (usize, LayerMacs)> + '_ {
        self.layers.iter().map(|(&k, &v)| (k, v))
    }

    pub fn untagged(&self) -> LayerMacs {
        self.untagged
    }

    pub fn total(&self) -> LayerMacs {
        let mut sum = self.untagged;
        for m in self.layers.values() {
            sum.add(m);
        }
        sum
    }

    pub fn merge(&mut self, other: &MacCounter) {
        for (id, m) in &other.layers {
            self.layers.entry(*id).or_default().add(m);
        }
        self.untagged.add(&other.untagged);
    }

    pub fn reset(&mut self) {
        self.layers.clear();
        self.untagged = LayerMacs::default();
    }
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::Shape(format!(
            "{what} must be rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor, counter: &mut MacCounter) -> Result<Tensor> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    if b.shape()[0] != k {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out, None);
    counter.entry(None).forward += (m * k * n) as u64;
    Tensor::new(vec![m, n], out)
}

/// Gradients of `c = a·b` with respect to both operands.
pub fn matmul_backward(
    dc: &Tensor,
    a: &Tensor,
    b: &Tensor,
    counter: &mut MacCounter,
) -> Result<(Tensor, Tensor)> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let bt = transpose(k, n, b.data());
    let mut da = vec![0.0; m * k];
    gemm_nn(m, n, k, dc.data(), &bt, &mut da, None);
    let mut db = vec![0.0; k * n];
    gemm_tn(k, m, n, a.data(), dc.data(), &mut db, None);
    let e = counter.entry(None);
    e.input_grad += (m * n * k) as u64;
    e.weight_grad += (k * m * n) as u64;
    Ok((Tensor::new(vec![m, k], da)?, Tensor::new(vec![k, n], db)?))
}

fn linear_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    expect_rank(x, 2, "linear input")?;
    expect_rank(w, 2, "linear weight")?;
    let (m, c_in) = (x.shape()[0], x.shape()[1]);
    let c_out = w.shape()[0];
    if w.shape()[1] != c_in {
        return Err(Error::Dimension {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    Ok((m, c_in, c_out))
}

/// `y = x·wᵀ + bias` for `x[m×C_in]`, `w[C_out×C_in]`.
pub fn linear_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    counter: &mut MacCounter,
    layer: Option<usize>,
) -> Result<Tensor> {
    let (m, c_in, c_out) = linear_dims(x, w)?;
    let mut y = vec![0.0; m * c_out];
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(Error::Dimension {
                op: "linear bias",
                lhs: vec![c_out],
                rhs: b.shape().to_vec(),
            });
        }
        for row in y.chunks_exact_mut(c_out) {
            row.copy_from_slice(b.data());
        }
    }
    let wt = transpose(c_out, c_in, w.data());
    gemm_nn(m, c_in, c_out, x.data(), &wt, &mut y, None);
    counter.entry(layer).forward += (m * c_in * c_out) as u64;
    Tensor::new(vec![m, c_out], y)
}

/// Input gradient `dY·W` (always dense) and weight gradient `dYᵀ·X` restricted
/// to the unfrozen rows of `mask`. `None` means every row is computed.
pub fn linear_backward(
    dy: &Tensor,
    x: &Tensor,
    w: &Tensor,
    mask: Option<&RowMask>,
    counter: &mut MacCounter,
    layer: Option<usize>,
) -> Result<(Tensor, Tensor)> {
    let (m, c_in, c_out) = linear_dims(x, w)?;
    if dy.shape() != [m, c_out] {
        return Err(Error::Dimension {
            op: "linear_backward",
            lhs: dy.shape().to_vec(),
            rhs: vec![m, c_out],
        });
    }
    if let Some(mask) = mask {
        mask.check(c_out)?;
    }
    let mut dx = vec![0.0; m * c_in];
    gemm_nn(m, c_out, c_in, dy.data(), w.data(), &mut dx, None);

    let mut dw = vec![0.0; c_out * c_in];
    let rows = mask.map(RowMask::unfrozen_rows);
    let active = rows.as_ref().map_or(c_out, Vec::len);
    gemm_tn(c_out, m, c_in, dy.data(), x.data(), &mut dw, rows.as_deref());

    let e = counter.entry(layer);
    e.input_grad += (m * c_in * c_out) as u64;
    e.weight_grad += (m * c_in * active) as u64;
    Ok((
        Tensor::new(vec![m, c_in], dx)?,
        Tensor::new(vec![c_out, c_in], dw)?,
    ))
}

/// Column sums of a `[m×C]` gradient, or per-channel sums of `[N×C×H×W]`.
pub fn bias_grad(dy: &Tensor) -> Tensor {
    let channels = dy.shape()[1];
    let inner: usize = dy.shape()[2..].iter().product();
    let mut db = vec![0.0; channels];
    for sample in dy.data().chunks_exact(channels * inner) {
        for (c, plane) in sample.chunks_exact(inner).enumerate() {
            db[c] += plane.iter().sum::<f32>();
        }
    }
    Tensor::new(vec![channels], db).expect("channel count is positive")
}

/// Unfolded input patches retained from the forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    pub geometry: ConvGeometry,
    pub batch: usize,
    cols: Vec<f32>,
}

pub fn conv_geometry(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<ConvGeometry> {
    expect_rank(x, 4, "conv2d input")?;
    expect_rank(w, 4, "conv2d weight")?;
    let (c_in, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    if w.shape()[1] != c_in || w.shape()[3] != k {
        return Err(Error::Dimension {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    ConvGeometry::new(c_in, c_out, k, stride, padding, h, wd).ok_or_else(|| {
        Error::Shape(format!(
            "conv2d with kernel {k}, stride {stride}, padding {padding} on {h}x{wd} input has no output pixels"
        ))
    })
}

/// Direct convolution via per-sample im2col. Returns the output and the
/// unfolded patches needed by the backward pass.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    counter: &mut MacCounter,
    layer: Option<usize>,
) -> Result<(Tensor, ConvCache)> {
    let g = conv_geometry(x, w, stride, padding)?;
    let n = x.shape()[0];
    let (patch, pixels) = (g.patch_len(), g.out_pixels());
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return Err(Error::Dimension {
                op: "conv2d bias",
                lhs: vec![g.c_out],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let in_len = g.c_in * g.in_pixels();
    let out_len = g.c_out * pixels;
    let mut y = vec![0.0; n * out_len];
    let mut cols = Vec::with_capacity(n * patch * pixels);
    for (xs, ys) in x.data().chunks_exact(in_len).zip(y.chunks_exact_mut(out_len)) {
        let c = im2col(xs, &g);
        if let Some(b) = bias {
            for (plane, &bv) in ys.chunks_exact_mut(pixels).zip(b.data()) {
                plane.fill(bv);
            }
        }
        gemm_nn(g.c_out, patch, pixels, w.data(), &c, ys, None);
        cols.extend_from_slice(&c);
    }
    counter.entry(layer).forward += (n * patch * g.c_out * pixels) as u64;
    let out = Tensor::new(vec![n, g.c_out, g.h_out, g.w_out], y)?;
    Ok((
        out,
        ConvCache {
            geometry: g,
            batch: n,
            cols,
        },
    ))
}

/// Convolution backward from retained patches.
pub fn conv2d_backward_cached(
    dy: &Tensor,
    cache: &ConvCache,
    w: &Tensor,
    mask: Option<&RowMask>,
    counter: &mut MacCounter,
    layer: Option<usize>,
) -> Result<(Tensor, Tensor)> {
    let g = &cache.geometry;
    let n = cache.batch;
    let (patch, pixels) = (g.patch_len(), g.out_pixels());
    if dy.shape() != [n, g.c_out, g.h_out, g.w_out] {
        return Err(Error::Dimension {
            op: "conv2d_backward",
            lhs: dy.shape().to_vec(),
            rhs: vec![n, g.c_out, g.h_out, g.w_out],
        });
    }
    if let Some(mask) = mask {
        mask.check(g.c_out)?;
    }
    let rows = mask.map(RowMask::unfrozen_rows);
    let active = rows.as_ref().map_or(g.c_out, Vec::len);

    let in_len = g.c_in * g.in_pixels();
    let mut dx = vec![0.0; n * in_len];
    let mut dw = vec![0.0; g.c_out * patch];
    let mut dcols = vec![0.0; patch * pixels];
    let samples = dy
        .data()
        .chunks_exact(g.c_out * pixels)
        .zip(cache.cols.chunks_exact(patch * pixels))
        .zip(dx.chunks_exact_mut(in_len));
    for ((dys, cols), dxs) in samples {
        dcols.fill(0.0);
        gemm_tn(patch, g.c_out, pixels, w.data(), dys, &mut dcols, None);
        col2im(&dcols, g, dxs);
        if active > 0 {
            let cols_t = transpose(patch, pixels, cols);
            gemm_nn(g.c_out, pixels, patch, dys, &cols_t, &mut dw, rows.as_deref());
        }
    }
    let e = counter.entry(layer);
    e.input_grad += (n * patch * g.c_out * pixels) as u64;
    e.weight_grad += (n * patch * active * pixels) as u64;
    Ok((
        Tensor::new(vec![n, g.c_in, g.h_in, g.w_in], dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
    ))
}

/// Convolution backward recomputing the unfolded input from `x`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    dy: &Tensor,
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
    mask: Option<&RowMask>,
    counter: &mut MacCounter,
    layer: Option<usize>,
) -> Result<(Tensor, Tensor)> {
    let g = conv_geometry(x, w, stride, padding)?;
    let in_len = g.c_in * g.in_pixels();
    let cols = x
        .data()
        .chunks_exact(in_len)
        .flat_map(|xs| im2col(xs, &g))
        .collect();
    let cache = ConvCache {
        geometry: g,
        batch: x.shape()[0],
        cols,
    };
    conv2d_backward_cached(dy, &cache, w, mask, counter, layer)
}

/// Per-channel statistics used by batch-statistic normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct NormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

fn channel_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(Error::Shape(format!(
            "normalization needs [N, C, ...] input, got {:?}",
            x.shape()
        )));
    }
    let inner: usize = x.shape()[2..].iter().product();
    Ok((x.shape()[0], x.shape()[1], inner))
}

fn check_channels(what: &'static str, t: &[f32], c: usize) -> Result<()> {
    if t.len() != c {
        return Err(Error::Dimension {
            op: what,
            lhs: vec![c],
            rhs: vec![t.len()],
        });
    }
    Ok(())
}

/// Normalizes each channel with the batch mean and biased variance, then
/// applies `gamma·x̂ + beta`. Returns the batch statistics alongside.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<(Tensor, ChannelStats, NormCache)> {
    let (n, c, inner) = channel_layout(x)?;
    check_channels("batch_norm gamma", gamma, c)?;
    check_channels("batch_norm beta", beta, c)?;
    let count = (n * inner) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let plane = |s: usize| &x.data()[(s * c + ch) * inner..(s * c + ch + 1) * inner];
        let sum: f64 = (0..n).flat_map(plane).map(|&v| v as f64).sum();
        let mu = sum / count;
        let sq: f64 = (0..n).flat_map(plane).map(|&v| (v as f64 - mu).powi(2)).sum();
        mean[ch] = mu as f32;
        var[ch] = (sq / count) as f32;
    }
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    let mut y = vec![0.0; x.numel()];
    for (i, (&xv, (xh, yv))) in x.data().iter().zip(xhat.iter_mut().zip(y.iter_mut())).enumerate() {
        let ch = (i / inner) % c;
        *xh = (xv - mean[ch]) * inv_std[ch];
        *yv = gamma[ch] * *xh + beta[ch];
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        ChannelStats { mean, var },
        NormCache { xhat, inv_std },
    ))
}

/// Gradients `(dx, dgamma, dbeta)` of [`batch_norm_train`].
pub fn batch_norm_backward(
    dy: &Tensor,
    cache: &NormCache,
    gamma: &[f32],
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let (n, c, inner) = channel_layout(dy)?;
    let count = (n * inner) as f32;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for (i, (&g, &xh)) in dy.data().iter().zip(&cache.xhat).enumerate() {
        let ch = (i / inner) % c;
        dbeta[ch] += g;
        dgamma[ch] += g * xh;
    }
    let dx = dy
        .data()
        .iter()
        .zip(&cache.xhat)
        .enumerate()
        .map(|(i, (&g, &xh))| {
            let ch = (i / inner) % c;
            gamma[ch] * cache.inv_std[ch] / count * (count * g - dbeta[ch] - xh * dgamma[ch])
        })
        .collect();
    Ok((Tensor::new(dy.shape().to_vec(), dx)?, dgamma, dbeta))
}

/// Normalization with fixed statistics (inference mode).
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    stats: &ChannelStats,
    eps: f32,
) -> Result<Tensor> {
    let (_, c, inner) = channel_layout(x)?;
    check_channels("batch_norm gamma", gamma, c)?;
    check_channels("batch_norm beta", beta, c)?;
    check_channels("batch_norm stats", &stats.mean, c)?;
    let y = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / inner) % c;
            gamma[ch] * (v - stats.mean[ch]) / (stats.var[ch] + eps).sqrt() + beta[ch]
        })
        .collect();
    Tensor::new(x.shape().to_vec(), y)
}

/// Inverse of the normalization affine map under the given statistics.
pub fn batch_norm_invert(
    y: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    stats: &ChannelStats,
    eps: f32,
) -> Result<Tensor> {
    let (_, c, inner) = channel_layout(y)?;
    check_channels("batch_norm stats", &stats.mean, c)?;
    let x = y
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / inner) % c;
            (v - beta[ch]) / gamma[ch] * (stats.var[ch] + eps).sqrt() + stats.mean[ch]
        })
        .collect();
    Tensor::new(y.shape().to_vec(), x)
}
