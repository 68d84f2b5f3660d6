//! Adaptive-moment optimizer over a slice of graph layers.

use std::collections::HashMap;

use crate::graph::Layer;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// Global L2 gradient-norm clip. Keeps the rare, heavily weighted
    /// false-positive batches from saturating the second-moment estimates
    /// of every shared parameter. 0 disables clipping.
    pub clip_norm: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `clip_norm`.
pub fn clip_global_norm(grads: &mut [Vec<Vec<f32>>], clip_norm: f32) {
    if clip_norm <= 0.0 {
        return;
    }
    let mut sq = 0.0f64;
    for layer in grads.iter() {
        for array in layer {
            for g in array {
                sq += (*g as f64) * (*g as f64);
            }
        }
    }
    let norm = sq.sqrt();
    if norm <= clip_norm as f64 {
        return;
    }
    let scale = (clip_norm as f64 / norm) as f32;
    for layer in grads.iter_mut() {
        for array in layer {
            for g in array.iter_mut() {
                *g *= scale;
            }
        }
    }
}

/// First/second moment state per (layer, array) pair.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: HashMap<(usize, usize), (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Apply one update. `grads[i]` aligns with layer `i`'s trainable
    /// arrays and is empty for frozen or weightless layers.
    pub fn step(&mut self, layers: &mut [Layer], grads: &[Vec<Vec<f32>>]) {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - (self.cfg.beta1 as f64).powf(t);
        let bias2 = 1.0 - (self.cfg.beta2 as f64).powf(t);
        for (li, layer) in layers.iter_mut().enumerate() {
            let layer_grads = &grads[li];
            if layer_grads.is_empty() {
                continue;
            }
            for (ai, (param, grad)) in layer
                .params
                .trainable_arrays_mut()
                .into_iter()
                .zip(layer_grads)
                .enumerate()
            {
                let (m, v) = self
                    .moments
                    .entry((li, ai))
                    .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
                for i in 0..param.len() {
                    let g = grad[i];
                    m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                    v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                    let m_hat = m[i] as f64 / bias1;
                    let v_hat = v[i] as f64 / bias2;
                    param[i] -= (self.cfg.learning_rate as f64 * m_hat
                        / (v_hat.sqrt() + self.cfg.epsilon as f64))
                        as f32;
                }
            }
        }
    }
}
