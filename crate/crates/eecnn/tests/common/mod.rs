//! Shared test support: an independent f64 reference network and the
//! central finite-difference gradient oracle built on it. The reference
//! reimplements every layer's forward semantics from the contract (same
//! zero padding, batch statistics, weight layouts) without touching the
//! production kernels, so the oracle both cross-checks the forward math
//! and supplies noise-free finite differences.

#![allow(dead_code)]

use eecnn::data::Label;
use eecnn::graph::{Layer, ModelGraph};
use eecnn::layers::{
    BatchNormParams, Conv1x1Params, DenseParams, LayerParams, SeparableConvParams,
};
use eecnn::loss::LossWeights;
use eecnn::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-2;
/// Floor for elements whose gradient magnitude sits inside f32 noise.
pub const FD_ABS_TOL: f64 = 1e-4;

/// Compare an analytic gradient against central differences of `loss`
/// over the vector `theta`.
pub fn fd_compare(
    theta: &mut [f64],
    analytic: &[f32],
    mut loss: impl FnMut(&[f64]) -> f64,
    what: &str,
) {
    assert_eq!(theta.len(), analytic.len(), "{what}: gradient length");
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + FD_STEP;
        let up = loss(theta);
        theta[i] = orig - FD_STEP;
        let down = loss(theta);
        theta[i] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let an = analytic[i] as f64;
        let err = (fd - an).abs();
        let scale = fd.abs().max(an.abs());
        let rel = if scale > 0.0 { err / scale } else { 0.0 };
        assert!(
            err <= FD_ABS_TOL || rel <= FD_REL_TOL,
            "{what}[{i}]: analytic {an:.6e} vs finite-difference {fd:.6e} (rel {rel:.3e})"
        );
    }
}

/// Uniform values excluding a dead band around zero, keeping activation
/// and pooling kinks away from the finite-difference step.
pub fn sample_away_from_zero(rng: &mut ChaCha8Rng, len: usize, scale: f32) -> Vec<f32> {
    (0..len)
        .map(|_| {
            let mag = rng.gen_range(0.05f32..scale);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], scale: f32) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, sample_away_from_zero(rng, len, scale)).unwrap()
}

// ---------------------------------------------------------------------------
// f64 reference network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RefTensor {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl RefTensor {
    pub fn from_tensor(t: &Tensor) -> Self {
        RefTensor {
            shape: t.shape(),
            data: t.data().iter().map(|v| *v as f64).collect(),
        }
    }

    pub fn from_f64(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        RefTensor { shape, data }
    }

    fn zeros(shape: [usize; 4]) -> Self {
        RefTensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    #[inline]
    fn idx(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.shape[1] + h) * self.shape[2] + w) * self.shape[3] + c
    }
}

/// f64 copy of one layer; `arrays` mirrors the trainable-array order of
/// the production layer (batchnorm moving stats are kept separately).
#[derive(Debug, Clone)]
pub struct RefLayer {
    pub kind: RefKind,
    pub arrays: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub enum RefKind {
    SeparableConv { in_c: usize, out_c: usize, k: usize, stride: usize, mult: usize },
    Conv1x1 { in_c: usize, out_c: usize },
    BatchNorm { c: usize, eps: f64, moving: Option<(Vec<f64>, Vec<f64>)> },
    LeakyRelu { alpha: f64 },
    MaxPool { pool: usize, stride: usize },
    Flatten,
    Dense { in_dim: usize, out_dim: usize },
}

impl RefLayer {
    /// `train_stats = false` freezes batchnorm onto its moving statistics.
    pub fn from_params(params: &LayerParams, train_stats: bool) -> Self {
        let f64s = |a: &[f32]| a.iter().map(|v| *v as f64).collect::<Vec<f64>>();
        match params {
            LayerParams::SeparableConv(p) => RefLayer {
                kind: RefKind::SeparableConv {
                    in_c: p.in_channels,
                    out_c: p.out_channels,
                    k: p.kernel,
                    stride: p.stride,
                    mult: p.multiplier,
                },
                arrays: vec![f64s(&p.depthwise), f64s(&p.pointwise)],
            },
            LayerParams::Conv1x1(p) => RefLayer {
                kind: RefKind::Conv1x1 {
                    in_c: p.in_channels,
                    out_c: p.out_channels,
                },
                arrays: vec![f64s(&p.kernel)],
            },
            LayerParams::BatchNorm(p) => RefLayer {
                kind: RefKind::BatchNorm {
                    c: p.channels,
                    eps: p.epsilon as f64,
                    moving: (!train_stats).then(|| (f64s(&p.mean), f64s(&p.var))),
                },
                arrays: vec![f64s(&p.gamma), f64s(&p.beta)],
            },
            LayerParams::LeakyRelu { alpha } => RefLayer {
                kind: RefKind::LeakyRelu { alpha: *alpha as f64 },
                arrays: vec![],
            },
            LayerParams::MaxPool { pool, stride } => RefLayer {
                kind: RefKind::MaxPool { pool: *pool, stride: *stride },
                arrays: vec![],
            },
            LayerParams::Flatten => RefLayer {
                kind: RefKind::Flatten,
                arrays: vec![],
            },
            LayerParams::Dense(p) => RefLayer {
                kind: RefKind::Dense {
                    in_dim: p.in_dim,
                    out_dim: p.out_dim,
                },
                arrays: vec![f64s(&p.weights), f64s(&p.bias)],
            },
        }
    }

    pub fn forward(&self, x: &RefTensor) -> RefTensor {
        match &self.kind {
            RefKind::SeparableConv { in_c, out_c, k, stride, mult } => {
                let mid = ref_depthwise(x, &self.arrays[0], *in_c, *k, *stride, *mult);
                ref_pointwise(&mid, &self.arrays[1], *out_c)
            }
            RefKind::Conv1x1 { out_c, .. } => ref_pointwise(x, &self.arrays[0], *out_c),
            RefKind::BatchNorm { c, eps, moving } => {
                let (mean, var) = match moving {
                    Some((m, v)) => (m.clone(), v.clone()),
                    None => {
                        let m = x.data.len() / c;
                        let mut mean = vec![0.0; *c];
                        for chunk in x.data.chunks(*c) {
                            for (i, v) in chunk.iter().enumerate() {
                                mean[i] += v;
                            }
                        }
                        mean.iter_mut().for_each(|v| *v /= m as f64);
                        let mut var = vec![0.0; *c];
                        for chunk in x.data.chunks(*c) {
                            for (i, v) in chunk.iter().enumerate() {
                                var[i] += (v - mean[i]) * (v - mean[i]);
                            }
                        }
                        var.iter_mut().for_each(|v| *v /= m as f64);
                        (mean, var)
                    }
                };
                let mut out = x.clone();
                for chunk in out.data.chunks_mut(*c) {
                    for (i, v) in chunk.iter_mut().enumerate() {
                        *v = self.arrays[0][i] * (*v - mean[i]) / (var[i] + eps).sqrt()
                            + self.arrays[1][i];
                    }
                }
                out
            }
            RefKind::LeakyRelu { alpha } => {
                let mut out = x.clone();
                for v in out.data.iter_mut() {
                    if *v < 0.0 {
                        *v *= alpha;
                    }
                }
                out
            }
            RefKind::MaxPool { pool, stride } => {
                let [n, h, w, c] = x.shape;
                let oh = (h - pool) / stride + 1;
                let ow = (w - pool) / stride + 1;
                let mut out = RefTensor::zeros([n, oh, ow, c]);
                for b in 0..n {
                    for y in 0..oh {
                        for x0 in 0..ow {
                            for ci in 0..c {
                                let mut best = f64::NEG_INFINITY;
                                for py in 0..*pool {
                                    for px in 0..*pool {
                                        best = best.max(
                                            x.data[x.idx(b, y * stride + py, x0 * stride + px, ci)],
                                        );
                                    }
                                }
                                let oi = out.idx(b, y, x0, ci);
                                out.data[oi] = best;
                            }
                        }
                    }
                }
                out
            }
            RefKind::Flatten => RefTensor {
                shape: [x.shape[0], 1, 1, x.shape[1] * x.shape[2] * x.shape[3]],
                data: x.data.clone(),
            },
            RefKind::Dense { in_dim, out_dim } => {
                let n = x.shape[0];
                let mut out = RefTensor::zeros([n, 1, 1, *out_dim]);
                for b in 0..n {
                    for o in 0..*out_dim {
                        let mut acc = self.arrays[1][o];
                        for i in 0..*in_dim {
                            acc += x.data[b * in_dim + i] * self.arrays[0][i * out_dim + o];
                        }
                        out.data[b * out_dim + o] = acc;
                    }
                }
                out
            }
        }
    }
}

fn same_pad_begin(input: usize, kernel: usize, stride: usize) -> usize {
    let out = input.div_ceil(stride);
    ((out - 1) * stride + kernel).saturating_sub(input) / 2
}

fn ref_depthwise(x: &RefTensor, kernel: &[f64], in_c: usize, k: usize, stride: usize, mult: usize) -> RefTensor {
    let [n, h, w, _] = x.shape;
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let pt = same_pad_begin(h, k, stride);
    let pl = same_pad_begin(w, k, stride);
    let mut out = RefTensor::zeros([n, oh, ow, in_c * mult]);
    for b in 0..n {
        for y in 0..oh {
            for x0 in 0..ow {
                for ci in 0..in_c {
                    for mi in 0..mult {
                        let mut acc = 0.0;
                        for kh in 0..k {
                            let iy = (y * stride + kh) as isize - pt as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let ix = (x0 * stride + kw) as isize - pl as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data[x.idx(b, iy as usize, ix as usize, ci)]
                                    * kernel[((kh * k + kw) * in_c + ci) * mult + mi];
                            }
                        }
                        let oi = out.idx(b, y, x0, ci * mult + mi);
                        out.data[oi] = acc;
                    }
                }
            }
        }
    }
    out
}

fn ref_pointwise(x: &RefTensor, kernel: &[f64], out_c: usize) -> RefTensor {
    let [n, h, w, c] = x.shape;
    let mut out = RefTensor::zeros([n, h, w, out_c]);
    for p in 0..n * h * w {
        for o in 0..out_c {
            let mut acc = 0.0;
            for ci in 0..c {
                acc += x.data[p * c + ci] * kernel[ci * out_c + o];
            }
            out.data[p * out_c + o] = acc;
        }
    }
    out
}

/// Scalar projection loss sum(g * f(x)), the oracle's observable.
pub fn ref_projection(out: &RefTensor, g: &[f32]) -> f64 {
    out.data.iter().zip(g).map(|(y, gi)| y * *gi as f64).sum()
}

// ---------------------------------------------------------------------------
// f64 reference composite loss (formulas restated, not shared)
// ---------------------------------------------------------------------------

pub fn ref_sigmoid(z: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    p.clamp(1e-7, 1.0 - 1e-7)
}

pub fn ref_focal(p: f64, y: bool, gamma: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    let pt = if y { p } else { 1.0 - p };
    -(1.0 - pt).powf(gamma) * pt.ln()
}

pub fn ref_difficulty(label: &Label) -> f64 {
    if !label.is_ball() {
        return 1.0;
    }
    let base = (label.visibility as f64 + 1.0) / 4.0;
    if label.concealed {
        base * 0.5
    } else {
        base
    }
}

pub fn ref_quadrant(p: f64, y: bool, w: &LossWeights) -> f64 {
    let positive = p >= w.t_q as f64;
    (match (y, positive) {
        (true, true) => w.w_tp,
        (false, true) => w.w_fp,
        (false, false) => w.w_tn,
        (true, false) => w.w_fn,
    }) as f64
}

pub fn ref_composite_loss(raw: &RefTensor, labels: &[Label], w: &LossWeights) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (i, label) in labels.iter().enumerate() {
        let z = raw.data[i * 3];
        let x = raw.data[i * 3 + 1];
        let y = raw.data[i * 3 + 2];
        let p = ref_sigmoid(z);
        let focal = ref_focal(p, label.is_ball(), w.gamma as f64);
        let positional = if label.is_ball() {
            (x - label.center_x as f64).abs() + (y - label.center_y as f64).abs()
        } else {
            0.0
        };
        total += ref_difficulty(label)
            * ref_quadrant(p, label.is_ball(), w)
            * (w.w_c as f64 * focal + w.w_p as f64 * positional);
    }
    total / n as f64
}

// ---------------------------------------------------------------------------
// Random instance builders
// ---------------------------------------------------------------------------

pub fn random_sepconv(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, mult: usize, stride: usize) -> LayerParams {
    LayerParams::SeparableConv(SeparableConvParams {
        in_channels: in_c,
        out_channels: out_c,
        kernel: 3,
        stride,
        multiplier: mult,
        depthwise: sample_away_from_zero(rng, 9 * in_c * mult, 0.8),
        pointwise: sample_away_from_zero(rng, in_c * mult * out_c, 0.8),
    })
}

pub fn random_conv1x1(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize) -> LayerParams {
    LayerParams::Conv1x1(Conv1x1Params {
        in_channels: in_c,
        out_channels: out_c,
        kernel: sample_away_from_zero(rng, in_c * out_c, 0.8),
    })
}

pub fn random_batchnorm(rng: &mut ChaCha8Rng, c: usize) -> LayerParams {
    LayerParams::BatchNorm(BatchNormParams {
        channels: c,
        gamma: sample_away_from_zero(rng, c, 1.0),
        beta: sample_away_from_zero(rng, c, 0.5),
        mean: sample_away_from_zero(rng, c, 0.3),
        var: (0..c).map(|_| rng.gen_range(0.5f32..1.5)).collect(),
        epsilon: 1e-3,
    })
}

pub fn random_dense(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> LayerParams {
    LayerParams::Dense(DenseParams {
        in_dim,
        out_dim,
        weights: sample_away_from_zero(rng, in_dim * out_dim, 0.6),
        bias: sample_away_from_zero(rng, out_dim, 0.3),
    })
}

/// Small all-layer-kind graph on 8x8x3 inputs for full-pipeline checks.
pub fn small_graph(rng: &mut ChaCha8Rng) -> ModelGraph {
    let layer = |name: &str, params: LayerParams| Layer {
        name: name.to_string(),
        params,
        frozen: false,
    };
    ModelGraph {
        layers: vec![
            layer("sep", random_sepconv(rng, 3, 4, 2, 2)),
            layer("sep_bn", random_batchnorm(rng, 4)),
            layer("sep_act", LayerParams::LeakyRelu { alpha: 0.1 }),
            layer("pw", random_conv1x1(rng, 4, 4)),
            layer("pw_bn", random_batchnorm(rng, 4)),
            layer("pw_act", LayerParams::LeakyRelu { alpha: 0.1 }),
            layer("pool", LayerParams::MaxPool { pool: 2, stride: 2 }),
            layer("flatten", LayerParams::Flatten),
            layer("head", random_dense(rng, 2 * 2 * 4, 3)),
        ],
        ee_tap: None,
        ee_layers: Vec::new(),
    }
}

/// f64 mirror of a whole graph in training mode.
pub fn ref_graph(g: &ModelGraph) -> Vec<RefLayer> {
    g.layers
        .iter()
        .map(|l| RefLayer::from_params(&l.params, true))
        .collect()
}

pub fn ref_graph_forward(layers: &[RefLayer], x: &RefTensor) -> RefTensor {
    let mut cur = x.clone();
    for layer in layers {
        cur = layer.forward(&cur);
    }
    cur
}
