//! Model graphs: a linear trunk of layers plus an optional early-exit
//! branch, with freezing, splitting at the exit, and the builder for the
//! 32x32x3 ball-patch classifier.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    self, BatchNormParams, Conv1x1Params, DenseParams, LayerCache, LayerParams,
    SeparableConvParams,
};
use crate::loss::sigmoid;
use crate::tensor::Tensor;

pub const PATCH_SIZE: usize = 32;
pub const PATCH_CHANNELS: usize = 3;

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub params: LayerParams,
    pub frozen: bool,
}

/// Linear trunk plus optional early-exit branch. The branch consumes the
/// output of `layers[ee_tap]` and produces a single logit.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    pub ee_tap: Option<usize>,
    pub ee_layers: Vec<Layer>,
}

/// Per-sample main-head prediction. `confidence` is the logistic of the
/// first dense output; the position outputs are linear pixel coordinates
/// and may lie outside the patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MainPrediction {
    pub confidence: f32,
    pub x: f32,
    pub y: f32,
}

/// Head/tail pair produced by splitting at the early exit. The head maps a
/// patch to (tap features, exit confidence); the tail maps tap features to
/// the three main outputs.
#[derive(Debug, Clone)]
pub struct SplitModel {
    pub head: ModelGraph,
    pub tail: ModelGraph,
}

/// Architecture constants that are configurable but rarely changed.
#[derive(Debug, Clone, Copy)]
pub struct BuildConfig {
    pub leaky_alpha: f32,
    pub bn_epsilon: f32,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            leaky_alpha: 0.1,
            bn_epsilon: 1e-3,
        }
    }
}

fn glorot_uniform(rng: &mut ChaCha8Rng, len: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn bn_layer(name: &str, channels: usize, epsilon: f32) -> Layer {
    Layer {
        name: name.to_string(),
        params: LayerParams::BatchNorm(BatchNormParams {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            epsilon,
        }),
        frozen: false,
    }
}

fn act_layer(name: &str, alpha: f32) -> Layer {
    Layer {
        name: name.to_string(),
        params: LayerParams::LeakyRelu { alpha },
        frozen: false,
    }
}

/// Build the ball-patch classification CNN: four separable-conv blocks,
/// each followed by a 1x1 channel-reduction conv (every conv trailed by
/// batchnorm and leaky ReLU), then flatten and a 3-output dense head
/// (confidence logit, x, y). 6686 parameters, 78912 MACs per patch.
pub fn build_ball_cnn(seed: u64) -> ModelGraph {
    build_ball_cnn_with(seed, BuildConfig::default())
}

pub fn build_ball_cnn_with(seed: u64, cfg: BuildConfig) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rng_ref = &mut rng;
    let mut layers = Vec::new();

    // (separable out, depth multiplier, 1x1 reduction out)
    let blocks = [(8usize, 1usize, 4usize), (16, 2, 8), (20, 4, 12), (32, 8, 16)];
    let mut in_c = PATCH_CHANNELS;
    for (i, (sep_out, mult, red_out)) in blocks.iter().enumerate() {
        let b = i + 1;
        let k = 3usize;
        let mid_c = in_c * mult;
        let depthwise = glorot_uniform(&mut rng_ref, k * k * in_c * mult, k * k, k * k * mult);
        let pointwise = glorot_uniform(&mut rng_ref, mid_c * sep_out, mid_c, *sep_out);
        layers.push(Layer {
            name: format!("sep{b}"),
            params: LayerParams::SeparableConv(SeparableConvParams {
                in_channels: in_c,
                out_channels: *sep_out,
                kernel: k,
                stride: 2,
                multiplier: *mult,
                depthwise,
                pointwise,
            }),
            frozen: false,
        });
        layers.push(bn_layer(&format!("sep{b}_bn"), *sep_out, cfg.bn_epsilon));
        layers.push(act_layer(&format!("sep{b}_act"), cfg.leaky_alpha));

        let kernel = glorot_uniform(&mut rng_ref, sep_out * red_out, *sep_out, *red_out);
        layers.push(Layer {
            name: format!("pw{b}"),
            params: LayerParams::Conv1x1(Conv1x1Params {
                in_channels: *sep_out,
                out_channels: *red_out,
                kernel,
            }),
            frozen: false,
        });
        layers.push(bn_layer(&format!("pw{b}_bn"), *red_out, cfg.bn_epsilon));
        layers.push(act_layer(&format!("pw{b}_act"), cfg.leaky_alpha));
        in_c = *red_out;
    }

    layers.push(Layer {
        name: "flatten".to_string(),
        params: LayerParams::Flatten,
        frozen: false,
    });
    let head_in = 2 * 2 * in_c;
    let weights = glorot_uniform(&mut rng_ref, head_in * 3, head_in, 3);
    // Low-prior confidence bias: start every patch near p = 0.02 so the
    // heavy false-positive quadrant weight cannot fire at initialization.
    let prior: f32 = 0.02;
    layers.push(Layer {
        name: "head".to_string(),
        params: LayerParams::Dense(DenseParams {
            in_dim: head_in,
            out_dim: 3,
            weights,
            bias: vec![-((1.0 - prior) / prior).ln(), 0.0, 0.0],
        }),
        frozen: false,
    });

    ModelGraph {
        layers,
        ee_tap: None,
        ee_layers: Vec::new(),
    }
}

fn run_layers(layers: &[Layer], input: &Tensor) -> Result<Tensor> {
    let mut x = input.clone();
    for layer in layers {
        x = layers::forward(&layer.params, &x)?;
    }
    Ok(x)
}

pub fn run_layers_train(
    layers: &mut [Layer],
    input: &Tensor,
    momentum: f32,
) -> Result<(Tensor, Vec<LayerCache>)> {
    let mut x = input.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers.iter_mut() {
        let train_stats = !layer.frozen;
        let (y, cache) = layers::forward_cached(&mut layer.params, &x, train_stats, momentum)?;
        caches.push(cache);
        x = y;
    }
    Ok((x, caches))
}

/// Backprop through a layer slice. Returns the gradient w.r.t. the slice
/// input and per-layer parameter gradients (empty vectors for frozen or
/// weightless layers).
pub fn backprop_layers(
    layers: &[Layer],
    caches: &[LayerCache],
    grad_out: Tensor,
) -> Result<(Tensor, Vec<Vec<Vec<f32>>>)> {
    let mut grad = grad_out;
    let mut param_grads = vec![Vec::new(); layers.len()];
    for (i, layer) in layers.iter().enumerate().rev() {
        let g = layers::backward(&layer.params, &caches[i], &grad, !layer.frozen)?;
        param_grads[i] = g.params;
        grad = g.input;
    }
    Ok((grad, param_grads))
}

impl ModelGraph {
    pub fn has_early_exit(&self) -> bool {
        self.ee_tap.is_some()
    }

    pub fn trunk_param_count(&self) -> u64 {
        self.layers.iter().map(|l| l.params.param_count()).sum()
    }

    pub fn ee_param_count(&self) -> u64 {
        self.ee_layers.iter().map(|l| l.params.param_count()).sum()
    }

    pub fn total_param_count(&self) -> u64 {
        self.trunk_param_count() + self.ee_param_count()
    }

    /// Per-sample MACs of the trunk for the given input shape.
    pub fn trunk_mac_count(&self, input_shape: [usize; 4]) -> Result<u64> {
        let mut shape = input_shape;
        let mut total = 0u64;
        for layer in &self.layers {
            total += layer.params.mac_count(shape)?;
            shape = layer.params.output_shape(shape)?;
        }
        Ok(total)
    }

    pub fn ee_mac_count(&self, input_shape: [usize; 4]) -> Result<u64> {
        let mut shape = self.tap_shape(input_shape)?;
        let mut total = 0u64;
        for layer in &self.ee_layers {
            total += layer.params.mac_count(shape)?;
            shape = layer.params.output_shape(shape)?;
        }
        Ok(total)
    }

    /// Shape chain over the trunk, starting with the input shape.
    pub fn shape_chain(&self, input_shape: [usize; 4]) -> Result<Vec<[usize; 4]>> {
        let mut shapes = vec![input_shape];
        let mut shape = input_shape;
        for layer in &self.layers {
            shape = layer.params.output_shape(shape)?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    fn tap_shape(&self, input_shape: [usize; 4]) -> Result<[usize; 4]> {
        let tap = self
            .ee_tap
            .ok_or_else(|| Error::usage("model has no early exit"))?;
        let mut shape = input_shape;
        for layer in &self.layers[..=tap] {
            shape = layer.params.output_shape(shape)?;
        }
        Ok(shape)
    }

    fn check_patch_batch(&self, x: &Tensor) -> Result<()> {
        let [_, h, w, c] = x.shape();
        let expect = self.layers.first().map(|l| &l.params);
        if let Some(LayerParams::SeparableConv(p)) = expect {
            if c != p.in_channels {
                return Err(Error::parameter(format!(
                    "input has {c} channels, model expects {}",
                    p.in_channels
                )));
            }
        }
        if h != PATCH_SIZE || w != PATCH_SIZE {
            return Err(Error::parameter(format!(
                "input is {h}x{w}, model expects {PATCH_SIZE}x{PATCH_SIZE}"
            )));
        }
        Ok(())
    }

    /// Raw trunk output (batch, 1, 1, 3) at inference.
    pub fn forward_raw(&self, x: &Tensor) -> Result<Tensor> {
        run_layers(&self.layers, x)
    }

    /// Main-head predictions for a batch of 32x32x3 patches.
    pub fn forward_main(&self, x: &Tensor) -> Result<Vec<MainPrediction>> {
        self.check_patch_batch(x)?;
        let out = self.forward_raw(x)?;
        Ok(predictions_from_raw(&out))
    }

    /// Features at the early-exit tap point.
    pub fn features_at_tap(&self, x: &Tensor) -> Result<Tensor> {
        let tap = self
            .ee_tap
            .ok_or_else(|| Error::usage("model has no early exit"))?;
        run_layers(&self.layers[..=tap], x)
    }

    /// Early-exit confidence per sample.
    pub fn forward_ee(&self, x: &Tensor) -> Result<Vec<f32>> {
        let features = self.features_at_tap(x)?;
        self.ee_from_features(&features)
    }

    /// Early-exit confidence from already-computed tap features.
    pub fn ee_from_features(&self, features: &Tensor) -> Result<Vec<f32>> {
        if self.ee_layers.is_empty() {
            return Err(Error::usage("model has no early exit"));
        }
        let out = run_layers(&self.ee_layers, features)?;
        Ok(out.data().iter().map(|z| sigmoid(*z)).collect())
    }

    /// Attach the early-exit branch (maxpool 2x2 stride 2, flatten, dense
    /// to one logit) after the first block's activation. Trunk weights are
    /// untouched.
    pub fn attach_early_exit(&mut self, seed: u64) -> Result<()> {
        if self.has_early_exit() {
            return Err(Error::usage("early exit already attached"));
        }
        // Tap after the first block's post-activation output.
        let tap = self
            .layers
            .iter()
            .position(|l| l.params.kind() == layers::LayerKind::LeakyRelu)
            .ok_or_else(|| Error::usage("no activation layer to tap"))?;
        let tap_shape = {
            let mut shape = [1, PATCH_SIZE, PATCH_SIZE, PATCH_CHANNELS];
            for layer in &self.layers[..=tap] {
                shape = layer.params.output_shape(shape)?;
            }
            shape
        };
        let pooled = LayerParams::MaxPool { pool: 2, stride: 2 }.output_shape(tap_shape)?;
        let flat = pooled[1] * pooled[2] * pooled[3];

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = glorot_uniform(&mut rng, flat, flat, 1);
        // High-prior bias: the exit starts by letting everything through,
        // the recall-safe side of its heavy false-negative weighting.
        let prior: f32 = 0.9;
        self.ee_layers = vec![
            Layer {
                name: "ee_pool".to_string(),
                params: LayerParams::MaxPool { pool: 2, stride: 2 },
                frozen: false,
            },
            Layer {
                name: "ee_flatten".to_string(),
                params: LayerParams::Flatten,
                frozen: false,
            },
            Layer {
                name: "ee_dense".to_string(),
                params: LayerParams::Dense(DenseParams {
                    in_dim: flat,
                    out_dim: 1,
                    weights,
                    bias: vec![-((1.0 - prior) / prior).ln()],
                }),
                frozen: false,
            },
        ];
        self.ee_tap = Some(tap);
        Ok(())
    }

    /// Mark every trunk layer frozen; the early-exit branch stays trainable.
    pub fn freeze_trunk(&mut self) {
        for layer in &mut self.layers {
            layer.frozen = true;
        }
    }

    pub fn trunk_is_frozen(&self) -> bool {
        self.layers.iter().all(|l| l.frozen)
    }

    /// Split at the early exit: the head runs the trunk up to the tap plus
    /// the exit branch, the tail runs the remaining trunk layers.
    pub fn split_at_exit(&self) -> Result<SplitModel> {
        let tap = self
            .ee_tap
            .ok_or_else(|| Error::usage("cannot split: model has no early exit"))?;
        let head = ModelGraph {
            layers: self.layers[..=tap].to_vec(),
            ee_tap: Some(tap),
            ee_layers: self.ee_layers.clone(),
        };
        let tail = ModelGraph {
            layers: self.layers[tap + 1..].to_vec(),
            ee_tap: None,
            ee_layers: Vec::new(),
        };
        Ok(SplitModel { head, tail })
    }

    /// FNV-1a over the bit patterns of all trunk weight arrays.
    pub fn trunk_checksum(&self) -> u64 {
        checksum_layers(&self.layers)
    }

    pub fn ee_checksum(&self) -> u64 {
        checksum_layers(&self.ee_layers)
    }
}

pub fn predictions_from_raw(out: &Tensor) -> Vec<MainPrediction> {
    out.data()
        .chunks(3)
        .map(|c| MainPrediction {
            confidence: sigmoid(c[0]),
            x: c[1],
            y: c[2],
        })
        .collect()
}

fn checksum_layers(layers: &[Layer]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    let mut mix = |v: u64| {
        hash ^= v;
        hash = hash.wrapping_mul(0x100000001b3);
    };
    for layer in layers {
        for arr in layer.params.all_arrays() {
            for v in arr {
                mix(v.to_bits() as u64);
            }
        }
    }
    hash
}

impl SplitModel {
    /// Run the head: tap features plus per-sample exit confidence.
    pub fn head_forward(&self, x: &Tensor) -> Result<(Tensor, Vec<f32>)> {
        let features = self.head.forward_raw(x)?;
        let conf = self.head.ee_from_features(&features)?;
        Ok((features, conf))
    }

    /// Run the tail on tap features.
    pub fn tail_forward(&self, features: &Tensor) -> Result<Vec<MainPrediction>> {
        let out = self.tail.forward_raw(features)?;
        Ok(predictions_from_raw(&out))
    }

    /// Full (non-exiting) pass: equivalent to the unsplit model's main head.
    pub fn full_forward(&self, x: &Tensor) -> Result<Vec<MainPrediction>> {
        let (features, _) = self.head_forward(x)?;
        self.tail_forward(&features)
    }
}
