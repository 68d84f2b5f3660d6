//! Layer kernels: forward passes, exact reverse-mode gradients, and
//! per-layer MAC/parameter accounting.
//!
//! Weight layouts:
//! - depthwise kernel `[kh][kw][in_c][multiplier]`
//! - pointwise kernel `[in_c * multiplier][out_c]`
//! - 1x1 conv kernel `[in_c][out_c]`
//! - dense kernel `[in][out]` plus bias `[out]`
//! - batchnorm gamma/beta/mean/var, each `[c]`
//!
//! Convolutional layers carry no bias; a batchnorm follows each in the
//! architectures built here.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    SeparableConv,
    Conv1x1,
    BatchNorm,
    LeakyRelu,
    MaxPool,
    Flatten,
    Dense,
}

#[derive(Debug, Clone)]
pub struct SeparableConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub multiplier: usize,
    /// `[kh][kw][in_c][multiplier]`
    pub depthwise: Vec<f32>,
    /// `[in_c * multiplier][out_c]`
    pub pointwise: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Conv1x1Params {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[in_c][out_c]`
    pub kernel: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub channels: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    /// Moving average of the mean, used at inference time.
    pub mean: Vec<f32>,
    /// Moving average of the (biased) variance, used at inference time.
    pub var: Vec<f32>,
    pub epsilon: f32,
}

#[derive(Debug, Clone)]
pub struct DenseParams {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[in][out]`
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone)]
pub enum LayerParams {
    SeparableConv(SeparableConvParams),
    Conv1x1(Conv1x1Params),
    BatchNorm(BatchNormParams),
    LeakyRelu { alpha: f32 },
    MaxPool { pool: usize, stride: usize },
    Flatten,
    Dense(DenseParams),
}

impl LayerParams {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerParams::SeparableConv(_) => LayerKind::SeparableConv,
            LayerParams::Conv1x1(_) => LayerKind::Conv1x1,
            LayerParams::BatchNorm(_) => LayerKind::BatchNorm,
            LayerParams::LeakyRelu { .. } => LayerKind::LeakyRelu,
            LayerParams::MaxPool { .. } => LayerKind::MaxPool,
            LayerParams::Flatten => LayerKind::Flatten,
            LayerParams::Dense(_) => LayerKind::Dense,
        }
    }

    /// Weight arrays that receive gradient updates.
    pub fn trainable_arrays(&self) -> Vec<&[f32]> {
        match self {
            LayerParams::SeparableConv(p) => vec![&p.depthwise, &p.pointwise],
            LayerParams::Conv1x1(p) => vec![&p.kernel],
            LayerParams::BatchNorm(p) => vec![&p.gamma, &p.beta],
            LayerParams::Dense(p) => vec![&p.weights, &p.bias],
            _ => vec![],
        }
    }

    pub fn trainable_arrays_mut(&mut self) -> Vec<&mut Vec<f32>> {
        match self {
            LayerParams::SeparableConv(p) => vec![&mut p.depthwise, &mut p.pointwise],
            LayerParams::Conv1x1(p) => vec![&mut p.kernel],
            LayerParams::BatchNorm(p) => vec![&mut p.gamma, &mut p.beta],
            LayerParams::Dense(p) => vec![&mut p.weights, &mut p.bias],
            _ => vec![],
        }
    }

    /// All stored arrays, in serialization order (includes batchnorm moving
    /// statistics, which are not gradient-trained).
    pub fn all_arrays(&self) -> Vec<&[f32]> {
        match self {
            LayerParams::SeparableConv(p) => vec![&p.depthwise, &p.pointwise],
            LayerParams::Conv1x1(p) => vec![&p.kernel],
            LayerParams::BatchNorm(p) => vec![&p.gamma, &p.beta, &p.mean, &p.var],
            LayerParams::Dense(p) => vec![&p.weights, &p.bias],
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> u64 {
        self.all_arrays().iter().map(|a| a.len() as u64).sum()
    }

    /// Output shape for the given input shape, validating channel counts.
    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [n, h, w, c] = input;
        match self {
            LayerParams::SeparableConv(p) => {
                if c != p.in_channels {
                    return Err(Error::parameter(format!(
                        "separable conv expects {} input channels, got {}",
                        p.in_channels, c
                    )));
                }
                let oh = conv_out_dim(h, p.kernel, p.stride);
                let ow = conv_out_dim(w, p.kernel, p.stride);
                Ok([n, oh, ow, p.out_channels])
            }
            LayerParams::Conv1x1(p) => {
                if c != p.in_channels {
                    return Err(Error::parameter(format!(
                        "1x1 conv expects {} input channels, got {}",
                        p.in_channels, c
                    )));
                }
                Ok([n, h, w, p.out_channels])
            }
            LayerParams::BatchNorm(p) => {
                if c != p.channels {
                    return Err(Error::parameter(format!(
                        "batchnorm expects {} channels, got {}",
                        p.channels, c
                    )));
                }
                Ok(input)
            }
            LayerParams::LeakyRelu { .. } => Ok(input),
            LayerParams::MaxPool { pool, stride } => {
                if h < *pool || w < *pool || (h - pool) % stride != 0 || (w - pool) % stride != 0 {
                    return Err(Error::parameter(format!(
                        "maxpool {}x{} stride {} does not tile {}x{} input",
                        pool, pool, stride, h, w
                    )));
                }
                Ok([n, (h - pool) / stride + 1, (w - pool) / stride + 1, c])
            }
            LayerParams::Flatten => Ok([n, 1, 1, h * w * c]),
            LayerParams::Dense(p) => {
                let flat = h * w * c;
                if flat != p.in_dim {
                    return Err(Error::parameter(format!(
                        "dense expects input length {}, got {}",
                        p.in_dim, flat
                    )));
                }
                Ok([n, 1, 1, p.out_dim])
            }
        }
    }

    /// Multiply-accumulate count for one sample of the given input shape.
    /// Convention: convolutions count `out_h*out_w*out_c*kh*kw*in_per_out`
    /// multiplies, a separable conv sums its depthwise and pointwise stages,
    /// dense counts `in*out`; batchnorm, activations, pooling and flatten
    /// cost zero.
    pub fn mac_count(&self, input: [usize; 4]) -> Result<u64> {
        let out = self.output_shape(input)?;
        let [_, oh, ow, _] = out;
        Ok(match self {
            LayerParams::SeparableConv(p) => {
                let mid_c = (p.in_channels * p.multiplier) as u64;
                let dw = (oh * ow) as u64 * mid_c * (p.kernel * p.kernel) as u64;
                let pw = (oh * ow) as u64 * p.out_channels as u64 * mid_c;
                dw + pw
            }
            LayerParams::Conv1x1(p) => {
                (oh * ow) as u64 * p.out_channels as u64 * p.in_channels as u64
            }
            LayerParams::Dense(p) => (p.in_dim * p.out_dim) as u64,
            _ => 0,
        })
    }
}

/// Spatial output size under same-padding: `ceil(in / stride)`.
fn conv_out_dim(input: usize, _kernel: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

/// Zero same-padding split: total is `max((out-1)*stride + kernel - in, 0)`,
/// with the extra pixel (if odd) on the end.
fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = conv_out_dim(input, kernel, stride);
    let needed = (out - 1) * stride + kernel;
    let total = needed.saturating_sub(input);
    (total / 2, total - total / 2)
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

pub fn leaky_relu(x: &Tensor, alpha: f32) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v *= alpha;
        }
    }
    out
}

/// Inference-mode batch normalization using the stored moving statistics.
pub fn batchnorm_infer(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    check_bn_shapes(x, p)?;
    let c = p.channels;
    let mut scale = vec![0.0f32; c];
    let mut shift = vec![0.0f32; c];
    for i in 0..c {
        let inv_std = 1.0 / (p.var[i] + p.epsilon).sqrt();
        scale[i] = p.gamma[i] * inv_std;
        shift[i] = p.beta[i] - p.mean[i] * scale[i];
    }
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(c) {
        for (i, v) in chunk.iter_mut().enumerate() {
            *v = *v * scale[i] + shift[i];
        }
    }
    Ok(out)
}

fn check_bn_shapes(x: &Tensor, p: &BatchNormParams) -> Result<()> {
    if x.channels() != p.channels {
        return Err(Error::parameter(format!(
            "batchnorm expects {} channels, got {}",
            p.channels,
            x.channels()
        )));
    }
    for (name, arr) in [
        ("gamma", &p.gamma),
        ("beta", &p.beta),
        ("mean", &p.mean),
        ("var", &p.var),
    ] {
        if arr.len() != p.channels {
            return Err(Error::parameter(format!(
                "batchnorm {name} has length {}, expected {}",
                arr.len(),
                p.channels
            )));
        }
    }
    if p.epsilon <= 0.0 {
        return Err(Error::parameter("batchnorm epsilon must be > 0"));
    }
    Ok(())
}

pub struct BnCache {
    /// Normalized activations, same layout as the input.
    pub x_hat: Vec<f32>,
    /// Per-channel 1/sqrt(var + eps) actually used in the forward pass.
    pub inv_std: Vec<f32>,
    /// Whether batch statistics (true) or moving statistics (false) were used.
    pub batch_stats: bool,
    pub shape: [usize; 4],
}

/// Training-mode batch normalization: normalizes with batch statistics and
/// updates the moving averages in place
/// (`new = momentum * old + (1 - momentum) * batch`).
pub fn batchnorm_train(x: &Tensor, p: &mut BatchNormParams, momentum: f32) -> Result<(Tensor, BnCache)> {
    check_bn_shapes(x, p)?;
    let c = p.channels;
    let m = x.len() / c;
    if m == 0 {
        return Err(Error::parameter("batchnorm on empty tensor"));
    }
    let mut mean = vec![0.0f64; c];
    for chunk in x.data().chunks(c) {
        for (i, v) in chunk.iter().enumerate() {
            mean[i] += *v as f64;
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    let mut var = vec![0.0f64; c];
    for chunk in x.data().chunks(c) {
        for (i, v) in chunk.iter().enumerate() {
            let d = *v as f64 - mean[i];
            var[i] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= m as f64;
    }

    let mut inv_std = vec![0.0f32; c];
    for i in 0..c {
        inv_std[i] = 1.0 / ((var[i] as f32) + p.epsilon).sqrt();
    }
    let mut out = Tensor::zeros(x.shape());
    let mut x_hat = vec![0.0f32; x.len()];
    for (j, chunk) in x.data().chunks(c).enumerate() {
        for (i, v) in chunk.iter().enumerate() {
            let xn = (*v - mean[i] as f32) * inv_std[i];
            x_hat[j * c + i] = xn;
            out.data_mut()[j * c + i] = p.gamma[i] * xn + p.beta[i];
        }
    }
    for i in 0..c {
        p.mean[i] = momentum * p.mean[i] + (1.0 - momentum) * mean[i] as f32;
        p.var[i] = momentum * p.var[i] + (1.0 - momentum) * var[i] as f32;
    }
    Ok((
        out,
        BnCache {
            x_hat,
            inv_std,
            batch_stats: true,
            shape: x.shape(),
        },
    ))
}

/// Inference-mode forward that still records a cache, for graphs whose
/// frozen layers must propagate gradients without parameter updates.
pub fn batchnorm_infer_cached(x: &Tensor, p: &BatchNormParams) -> Result<(Tensor, BnCache)> {
    let out = batchnorm_infer(x, p)?;
    let c = p.channels;
    let mut inv_std = vec![0.0f32; c];
    for i in 0..c {
        inv_std[i] = 1.0 / (p.var[i] + p.epsilon).sqrt();
    }
    let mut x_hat = vec![0.0f32; x.len()];
    for (j, chunk) in x.data().chunks(c).enumerate() {
        for (i, v) in chunk.iter().enumerate() {
            x_hat[j * c + i] = (*v - p.mean[i]) * inv_std[i];
        }
    }
    Ok((
        out,
        BnCache {
            x_hat,
            inv_std,
            batch_stats: false,
            shape: x.shape(),
        },
    ))
}

/// Depthwise stage of a separable convolution: each input channel is
/// convolved with `multiplier` kernels, producing channel `c*m + r`.
fn depthwise_conv(x: &Tensor, p: &SeparableConvParams) -> Tensor {
    let [n, h, w, c] = x.shape();
    let k = p.kernel;
    let s = p.stride;
    let mult = p.multiplier;
    let (pt, _) = same_padding(h, k, s);
    let (pl, _) = same_padding(w, k, s);
    let oh = conv_out_dim(h, k, s);
    let ow = conv_out_dim(w, k, s);
    let mid_c = c * mult;
    let mut out = Tensor::zeros([n, oh, ow, mid_c]);
    for b in 0..n {
        for y in 0..oh {
            for x0 in 0..ow {
                let oi = out.index(b, y, x0, 0);
                for kh in 0..k {
                    let iy = (y * s + kh) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let ix = (x0 * s + kw) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ii = x.index(b, iy as usize, ix as usize, 0);
                        let ki = ((kh * k + kw) * c) * mult;
                        let xin = &x.data()[ii..ii + c];
                        let kern = &p.depthwise[ki..ki + c * mult];
                        let acc = &mut out.data_mut()[oi..oi + mid_c];
                        for ci in 0..c {
                            let v = xin[ci];
                            for mi in 0..mult {
                                acc[ci * mult + mi] += v * kern[ci * mult + mi];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-pixel linear map `in_c -> out_c` with kernel layout `[in_c][out_c]`.
fn pointwise_map(x: &Tensor, kernel: &[f32], out_c: usize) -> Tensor {
    let [n, h, w, c] = x.shape();
    let mut out = Tensor::zeros([n, h, w, out_c]);
    let pixels = n * h * w;
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..pixels {
        let xi = p * c;
        let oi = p * out_c;
        let acc = &mut od[oi..oi + out_c];
        for ci in 0..c {
            let v = xd[xi + ci];
            if v == 0.0 {
                continue;
            }
            let row = &kernel[ci * out_c..(ci + 1) * out_c];
            for (a, k) in acc.iter_mut().zip(row) {
                *a += v * k;
            }
        }
    }
    out
}

/// Depthwise separable convolution, same zero padding.
pub fn separable_conv(x: &Tensor, p: &SeparableConvParams) -> Result<Tensor> {
    Ok(separable_conv_cached(x, p)?.0)
}

pub fn separable_conv_cached(x: &Tensor, p: &SeparableConvParams) -> Result<(Tensor, Tensor)> {
    p.output_shape_checked(x.shape())?;
    let mid = depthwise_conv(x, p);
    let out = pointwise_map(&mid, &p.pointwise, p.out_channels);
    Ok((out, mid))
}

impl SeparableConvParams {
    fn output_shape_checked(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        LayerParams::SeparableConv(self.clone()).output_shape(input)
    }
}

pub fn conv1x1(x: &Tensor, p: &Conv1x1Params) -> Result<Tensor> {
    if x.channels() != p.in_channels {
        return Err(Error::parameter(format!(
            "1x1 conv expects {} input channels, got {}",
            p.in_channels,
            x.channels()
        )));
    }
    Ok(pointwise_map(x, &p.kernel, p.out_channels))
}

/// Max pooling; output element records the window maximum.
pub fn maxpool(x: &Tensor, pool: usize, stride: usize) -> Result<Tensor> {
    Ok(maxpool_cached(x, pool, stride)?.0)
}

pub fn maxpool_cached(x: &Tensor, pool: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let out_shape = LayerParams::MaxPool { pool, stride }.output_shape(x.shape())?;
    let [n, oh, ow, c] = out_shape;
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = vec![0usize; out.len()];
    for b in 0..n {
        for y in 0..oh {
            for x0 in 0..ow {
                for ci in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for py in 0..pool {
                        for px in 0..pool {
                            let i = x.index(b, y * stride + py, x0 * stride + px, ci);
                            let v = x.data()[i];
                            if v > best {
                                best = v;
                                best_i = i;
                            }
                        }
                    }
                    let oi = out.index(b, y, x0, ci);
                    out.data_mut()[oi] = best;
                    argmax[oi] = best_i;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn flatten(x: &Tensor) -> Tensor {
    x.flattened()
}

/// Fully connected layer on (batch, 1, 1, in) tensors: `y = x W + b`.
pub fn dense(x: &Tensor, p: &DenseParams) -> Result<Tensor> {
    let [n, h, w, c] = x.shape();
    if h * w * c != p.in_dim {
        return Err(Error::parameter(format!(
            "dense expects input length {}, got {}",
            p.in_dim,
            h * w * c
        )));
    }
    let mut out = Tensor::zeros([n, 1, 1, p.out_dim]);
    let od = out.data_mut();
    for b in 0..n {
        let xi = &x.data()[b * p.in_dim..(b + 1) * p.in_dim];
        let acc = &mut od[b * p.out_dim..(b + 1) * p.out_dim];
        acc.copy_from_slice(&p.bias);
        for (i, v) in xi.iter().enumerate() {
            if *v == 0.0 {
                continue;
            }
            let row = &p.weights[i * p.out_dim..(i + 1) * p.out_dim];
            for (a, k) in acc.iter_mut().zip(row) {
                *a += *v * *k;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Caches and backward passes
// ---------------------------------------------------------------------------

pub enum LayerCache {
    SeparableConv { input: Tensor, mid: Tensor },
    Conv1x1 { input: Tensor },
    BatchNorm(BnCache),
    LeakyRelu { input: Tensor },
    MaxPool { input_shape: [usize; 4], argmax: Vec<usize> },
    Flatten { input_shape: [usize; 4] },
    Dense { input: Tensor },
}

/// Gradients for one layer: `input` is the gradient w.r.t. the layer input,
/// `params` aligns with [`LayerParams::trainable_arrays`] (empty for frozen
/// layers and layers without weights).
pub struct LayerGrads {
    pub input: Tensor,
    pub params: Vec<Vec<f32>>,
}

/// Forward pass recording whatever the backward pass needs. `train_stats`
/// selects batch statistics for batchnorm layers (and updates their moving
/// averages with `momentum`).
pub fn forward_cached(
    params: &mut LayerParams,
    x: &Tensor,
    train_stats: bool,
    momentum: f32,
) -> Result<(Tensor, LayerCache)> {
    match params {
        LayerParams::SeparableConv(p) => {
            let (out, mid) = separable_conv_cached(x, p)?;
            Ok((out, LayerCache::SeparableConv { input: x.clone(), mid }))
        }
        LayerParams::Conv1x1(p) => {
            let out = conv1x1(x, p)?;
            Ok((out, LayerCache::Conv1x1 { input: x.clone() }))
        }
        LayerParams::BatchNorm(p) => {
            let (out, cache) = if train_stats {
                batchnorm_train(x, p, momentum)?
            } else {
                batchnorm_infer_cached(x, p)?
            };
            Ok((out, LayerCache::BatchNorm(cache)))
        }
        LayerParams::LeakyRelu { alpha } => {
            let out = leaky_relu(x, *alpha);
            Ok((out, LayerCache::LeakyRelu { input: x.clone() }))
        }
        LayerParams::MaxPool { pool, stride } => {
            let (out, argmax) = maxpool_cached(x, *pool, *stride)?;
            Ok((
                out,
                LayerCache::MaxPool {
                    input_shape: x.shape(),
                    argmax,
                },
            ))
        }
        LayerParams::Flatten => {
            let out = flatten(x);
            Ok((
                out,
                LayerCache::Flatten {
                    input_shape: x.shape(),
                },
            ))
        }
        LayerParams::Dense(p) => {
            let out = dense(x, p)?;
            Ok((out, LayerCache::Dense { input: x.clone() }))
        }
    }
}

/// Forward pass without caching. Pure for immutable `params`.
pub fn forward(params: &LayerParams, x: &Tensor) -> Result<Tensor> {
    match params {
        LayerParams::SeparableConv(p) => separable_conv(x, p),
        LayerParams::Conv1x1(p) => conv1x1(x, p),
        LayerParams::BatchNorm(p) => batchnorm_infer(x, p),
        LayerParams::LeakyRelu { alpha } => Ok(leaky_relu(x, *alpha)),
        LayerParams::MaxPool { pool, stride } => maxpool(x, *pool, *stride),
        LayerParams::Flatten => Ok(flatten(x)),
        LayerParams::Dense(p) => dense(x, p),
    }
}

/// Reverse-mode gradients for any layer kind. `want_params` is false for
/// frozen layers, which still propagate `grad_in` but report no parameter
/// gradients.
pub fn backward(
    params: &LayerParams,
    cache: &LayerCache,
    grad_out: &Tensor,
    want_params: bool,
) -> Result<LayerGrads> {
    match (params, cache) {
        (LayerParams::SeparableConv(p), LayerCache::SeparableConv { input, mid }) => {
            backward_separable(p, input, mid, grad_out, want_params)
        }
        (LayerParams::Conv1x1(p), LayerCache::Conv1x1 { input }) => {
            let (gin, gk) = backward_pointwise(input, &p.kernel, p.out_channels, grad_out, want_params);
            Ok(LayerGrads {
                input: gin,
                params: if want_params { vec![gk] } else { vec![] },
            })
        }
        (LayerParams::BatchNorm(p), LayerCache::BatchNorm(c)) => {
            backward_batchnorm(p, c, grad_out, want_params)
        }
        (LayerParams::LeakyRelu { alpha }, LayerCache::LeakyRelu { input }) => {
            let mut gin = grad_out.clone();
            for (g, x) in gin.data_mut().iter_mut().zip(input.data()) {
                if *x < 0.0 {
                    *g *= alpha;
                }
            }
            Ok(LayerGrads {
                input: gin,
                params: vec![],
            })
        }
        (LayerParams::MaxPool { .. }, LayerCache::MaxPool { input_shape, argmax }) => {
            let mut gin = Tensor::zeros(*input_shape);
            for (g, i) in grad_out.data().iter().zip(argmax) {
                gin.data_mut()[*i] += g;
            }
            Ok(LayerGrads {
                input: gin,
                params: vec![],
            })
        }
        (LayerParams::Flatten, LayerCache::Flatten { input_shape }) => {
            let gin = Tensor::from_vec(*input_shape, grad_out.data().to_vec())?;
            Ok(LayerGrads {
                input: gin,
                params: vec![],
            })
        }
        (LayerParams::Dense(p), LayerCache::Dense { input }) => {
            backward_dense(p, input, grad_out, want_params)
        }
        _ => Err(Error::usage("layer cache does not match layer kind")),
    }
}

fn backward_dense(
    p: &DenseParams,
    input: &Tensor,
    grad_out: &Tensor,
    want_params: bool,
) -> Result<LayerGrads> {
    let n = input.batch();
    let mut gin = Tensor::zeros(input.shape());
    let mut gw = vec![0.0f32; p.weights.len()];
    let mut gb = vec![0.0f32; p.bias.len()];
    for b in 0..n {
        let xi = &input.data()[b * p.in_dim..(b + 1) * p.in_dim];
        let go = &grad_out.data()[b * p.out_dim..(b + 1) * p.out_dim];
        let gi = &mut gin.data_mut()[b * p.in_dim..(b + 1) * p.in_dim];
        for (gbv, gov) in gb.iter_mut().zip(go) {
            *gbv += gov;
        }
        for i in 0..p.in_dim {
            let row = &p.weights[i * p.out_dim..(i + 1) * p.out_dim];
            let grow = &mut gw[i * p.out_dim..(i + 1) * p.out_dim];
            let mut acc = 0.0f32;
            let v = xi[i];
            for (j, gov) in go.iter().enumerate() {
                acc += gov * row[j];
                grow[j] += gov * v;
            }
            gi[i] = acc;
        }
    }
    Ok(LayerGrads {
        input: gin,
        params: if want_params { vec![gw, gb] } else { vec![] },
    })
}

fn backward_pointwise(
    input: &Tensor,
    kernel: &[f32],
    out_c: usize,
    grad_out: &Tensor,
    want_params: bool,
) -> (Tensor, Vec<f32>) {
    let c = input.channels();
    let pixels = input.len() / c;
    let mut gin = Tensor::zeros(input.shape());
    let mut gk = vec![0.0f32; kernel.len()];
    let xd = input.data();
    let god = grad_out.data();
    let gid = gin.data_mut();
    for p in 0..pixels {
        let xi = p * c;
        let oi = p * out_c;
        let go = &god[oi..oi + out_c];
        for ci in 0..c {
            let row = &kernel[ci * out_c..(ci + 1) * out_c];
            let grow = &mut gk[ci * out_c..(ci + 1) * out_c];
            let v = xd[xi + ci];
            let mut acc = 0.0f32;
            for (j, gov) in go.iter().enumerate() {
                acc += gov * row[j];
                grow[j] += gov * v;
            }
            gid[xi + ci] = acc;
        }
    }
    (gin, if want_params { gk } else { Vec::new() })
}

fn backward_separable(
    p: &SeparableConvParams,
    input: &Tensor,
    mid: &Tensor,
    grad_out: &Tensor,
    want_params: bool,
) -> Result<LayerGrads> {
    // Pointwise stage backward.
    let (gmid, gpw) = backward_pointwise(mid, &p.pointwise, p.out_channels, grad_out, true);

    // Depthwise stage backward.
    let [n, h, w, c] = input.shape();
    let k = p.kernel;
    let s = p.stride;
    let mult = p.multiplier;
    let (pt, _) = same_padding(h, k, s);
    let (pl, _) = same_padding(w, k, s);
    let [_, oh, ow, _] = mid.shape();
    let mut gin = Tensor::zeros(input.shape());
    let mut gdw = vec![0.0f32; p.depthwise.len()];
    for b in 0..n {
        for y in 0..oh {
            for x0 in 0..ow {
                let gi = gmid.index(b, y, x0, 0);
                let gm = &gmid.data()[gi..gi + c * mult];
                for kh in 0..k {
                    let iy = (y * s + kh) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let ix = (x0 * s + kw) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ii = input.index(b, iy as usize, ix as usize, 0);
                        let ki = ((kh * k + kw) * c) * mult;
                        for ci in 0..c {
                            let xv = input.data()[ii + ci];
                            let mut acc = 0.0f32;
                            for mi in 0..mult {
                                let g = gm[ci * mult + mi];
                                acc += g * p.depthwise[ki + ci * mult + mi];
                                gdw[ki + ci * mult + mi] += g * xv;
                            }
                            gin.data_mut()[ii + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(LayerGrads {
        input: gin,
        params: if want_params { vec![gdw, gpw] } else { vec![] },
    })
}

fn backward_batchnorm(
    p: &BatchNormParams,
    c: &BnCache,
    grad_out: &Tensor,
    want_params: bool,
) -> Result<LayerGrads> {
    let ch = p.channels;
    let m = grad_out.len() / ch;
    let god = grad_out.data();

    let mut dgamma = vec![0.0f64; ch];
    let mut dbeta = vec![0.0f64; ch];
    for (j, chunk) in god.chunks(ch).enumerate() {
        for (i, g) in chunk.iter().enumerate() {
            dgamma[i] += (*g as f64) * (c.x_hat[j * ch + i] as f64);
            dbeta[i] += *g as f64;
        }
    }

    let mut gin = Tensor::zeros(c.shape);
    if c.batch_stats {
        // dx = gamma * inv_std * (dy - mean(dy) - x_hat * mean(dy * x_hat))
        let mf = m as f64;
        for (j, chunk) in god.chunks(ch).enumerate() {
            for (i, g) in chunk.iter().enumerate() {
                let xh = c.x_hat[j * ch + i] as f64;
                let v = (p.gamma[i] as f64)
                    * (c.inv_std[i] as f64)
                    * (*g as f64 - dbeta[i] / mf - xh * dgamma[i] / mf);
                gin.data_mut()[j * ch + i] = v as f32;
            }
        }
    } else {
        // Moving statistics are constants: dx = dy * gamma * inv_std.
        for (j, chunk) in god.chunks(ch).enumerate() {
            for (i, g) in chunk.iter().enumerate() {
                gin.data_mut()[j * ch + i] = g * p.gamma[i] * c.inv_std[i];
            }
        }
    }
    let params = if want_params {
        vec![
            dgamma.iter().map(|v| *v as f32).collect(),
            dbeta.iter().map(|v| *v as f32).collect(),
        ]
    } else {
        vec![]
    };
    Ok(LayerGrads { input: gin, params })
}
