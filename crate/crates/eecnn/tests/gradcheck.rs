//! Finite-difference gradient suite: every layer kind and the full
//! composite loss, checked against central differences of the f64
//! reference network on random small instances.

mod common;

use common::*;
use eecnn::data::Label;
use eecnn::graph::{backprop_layers, predictions_from_raw, run_layers_train, ModelGraph};
use eecnn::layers::{backward, forward_cached, LayerParams};
use eecnn::loss::{composite_loss_grad, LossWeights};
use eecnn::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 100;

/// One layer instance: check the input gradient and every parameter
/// array against the oracle.
fn check_layer_instance(params: &LayerParams, x: &Tensor, rng: &mut ChaCha8Rng, what: &str) {
    let out_shape = params.output_shape(x.shape()).unwrap();
    let g: Vec<f32> = (0..out_shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();

    let mut work = params.clone();
    let (_, cache) = forward_cached(&mut work, x, true, 0.9).unwrap();
    let g_tensor = Tensor::from_vec(out_shape, g.clone()).unwrap();
    let grads = backward(&work, &cache, &g_tensor, true).unwrap();

    let reference = RefLayer::from_params(params, true);

    // Input gradient.
    let mut theta: Vec<f64> = x.data().iter().map(|v| *v as f64).collect();
    let shape = x.shape();
    fd_compare(
        &mut theta,
        grads.input.data(),
        |t| ref_projection(&reference.forward(&RefTensor::from_f64(shape, t.to_vec())), &g),
        &format!("{what} input"),
    );

    // Parameter gradients.
    let xin = RefTensor::from_tensor(x);
    for ai in 0..reference.arrays.len() {
        let mut theta = reference.arrays[ai].clone();
        fd_compare(
            &mut theta,
            &grads.params[ai],
            |t| {
                let mut r2 = reference.clone();
                r2.arrays[ai] = t.to_vec();
                ref_projection(&r2.forward(&xin), &g)
            },
            &format!("{what} array {ai}"),
        );
    }
}

#[test]
fn fd_leaky_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA1);
    for i in 0..INSTANCES {
        let params = LayerParams::LeakyRelu { alpha: 0.05 + (i % 4) as f32 * 0.05 };
        let x = random_tensor(&mut rng, [2, 4, 4, 2], 1.0);
        check_layer_instance(&params, &x, &mut rng, "leaky_relu");
    }
}

#[test]
fn fd_batchnorm_training_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA2);
    for _ in 0..INSTANCES {
        let c = rng.gen_range(1..=3);
        let params = random_batchnorm(&mut rng, c);
        let x = random_tensor(&mut rng, [2, 4, 4, c], 1.0);
        check_layer_instance(&params, &x, &mut rng, "batchnorm");
    }
}

#[test]
fn fd_batchnorm_inference_mode() {
    // Frozen-trunk path: moving statistics are constants.
    let mut rng = ChaCha8Rng::seed_from_u64(0xA3);
    for _ in 0..INSTANCES {
        let c = rng.gen_range(1..=3);
        let params = random_batchnorm(&mut rng, c);
        let x = random_tensor(&mut rng, [2, 4, 4, c], 1.0);
        let out_shape = params.output_shape(x.shape()).unwrap();
        let g: Vec<f32> = (0..out_shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        let (_, cache) = forward_cached(&mut params.clone(), &x, false, 0.9).unwrap();
        let g_tensor = Tensor::from_vec(out_shape, g.clone()).unwrap();
        let grads = backward(&params, &cache, &g_tensor, true).unwrap();

        let reference = RefLayer::from_params(&params, false);
        let mut theta: Vec<f64> = x.data().iter().map(|v| *v as f64).collect();
        let shape = x.shape();
        fd_compare(
            &mut theta,
            grads.input.data(),
            |t| ref_projection(&reference.forward(&RefTensor::from_f64(shape, t.to_vec())), &g),
            "batchnorm infer input",
        );
    }
}

#[test]
fn fd_separable_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA4);
    for i in 0..INSTANCES {
        let in_c = 1 + i % 3;
        let mult = 1 + (i / 3) % 3;
        let stride = if i % 2 == 0 { 2 } else { 1 };
        let out_c = 2 + 2 * (i % 2);
        let params = random_sepconv(&mut rng, in_c, out_c, mult, stride);
        let x = random_tensor(&mut rng, [2, 4, 4, in_c], 1.0);
        check_layer_instance(&params, &x, &mut rng, "separable_conv");
    }
}

#[test]
fn fd_conv1x1() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA5);
    for i in 0..INSTANCES {
        let in_c = 1 + i % 4;
        let out_c = 1 + (i / 4) % 4;
        let params = random_conv1x1(&mut rng, in_c, out_c);
        let x = random_tensor(&mut rng, [2, 4, 4, in_c], 1.0);
        check_layer_instance(&params, &x, &mut rng, "conv1x1");
    }
}

#[test]
fn fd_maxpool() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA6);
    for _ in 0..INSTANCES {
        let params = LayerParams::MaxPool { pool: 2, stride: 2 };
        // Keep window runner-ups clear of the argmax so the step cannot
        // flip the selected element.
        let x = loop {
            let x = random_tensor(&mut rng, [2, 4, 4, 2], 1.0);
            if maxpool_gaps_ok(&x) {
                break x;
            }
        };
        check_layer_instance(&params, &x, &mut rng, "maxpool");
    }
}

fn maxpool_gaps_ok(x: &Tensor) -> bool {
    let [n, h, w, c] = x.shape();
    for b in 0..n {
        for y in (0..h).step_by(2) {
            for x0 in (0..w).step_by(2) {
                for ci in 0..c {
                    let mut vals = [
                        x.at(b, y, x0, ci),
                        x.at(b, y, x0 + 1, ci),
                        x.at(b, y + 1, x0, ci),
                        x.at(b, y + 1, x0 + 1, ci),
                    ];
                    vals.sort_by(|a, b| b.total_cmp(a));
                    if vals[0] - vals[1] < 5e-3 {
                        return false;
                    }
                }
            }
        }
    }
    true
}

#[test]
fn fd_flatten() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA7);
    for _ in 0..INSTANCES {
        let params = LayerParams::Flatten;
        let x = random_tensor(&mut rng, [2, 4, 4, 3], 1.0);
        check_layer_instance(&params, &x, &mut rng, "flatten");
    }
}

#[test]
fn fd_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA8);
    for i in 0..INSTANCES {
        let in_dim = 2 + i % 6;
        let out_dim = 1 + i % 3;
        let params = random_dense(&mut rng, in_dim, out_dim);
        let x = random_tensor(&mut rng, [2, 1, 1, in_dim], 1.0);
        check_layer_instance(&params, &x, &mut rng, "dense");
    }
}

// ---------------------------------------------------------------------------
// Full composite loss through an all-layer-kind graph
// ---------------------------------------------------------------------------

struct CompositeInstance {
    graph: ModelGraph,
    x: Tensor,
    labels: Vec<Label>,
    weights: LossWeights,
}

/// Margins that keep the loss locally smooth around the instance: no
/// activation input, pooling runner-up, quadrant threshold, or positional
/// delta sits within reach of the finite-difference step.
fn composite_instance_is_clean(inst: &CompositeInstance) -> bool {
    let mut gc = inst.graph.clone();
    let mut x = inst.x.clone();
    for layer in &mut gc.layers {
        if matches!(layer.params, LayerParams::LeakyRelu { .. })
            && x.data().iter().any(|v| v.abs() < 0.01)
        {
            return false;
        }
        if matches!(layer.params, LayerParams::MaxPool { .. }) && !maxpool_gaps_ok(&x) {
            return false;
        }
        let (out, _) = forward_cached(&mut layer.params, &x, true, 0.9).unwrap();
        x = out;
    }
    let preds = predictions_from_raw(&x);
    for (pred, label) in preds.iter().zip(&inst.labels) {
        if (pred.confidence - inst.weights.t_q).abs() < 0.05 {
            return false;
        }
        if label.is_ball()
            && ((pred.x - label.center_x).abs() < 0.01 || (pred.y - label.center_y).abs() < 0.01)
        {
            return false;
        }
    }
    true
}

fn make_composite_instance(seed: u64, heavy_quadrants: bool) -> CompositeInstance {
    let mut attempt = seed;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(attempt);
        let graph = small_graph(&mut rng);
        let x = random_tensor(&mut rng, [3, 8, 8, 3], 0.9);
        let mut labels = vec![
            Label {
                class: 1,
                center_x: rng.gen_range(-4.0..4.0),
                center_y: rng.gen_range(-4.0..4.0),
                bbox: [0.0; 4],
                concealed: false,
                visibility: 3,
            },
            Label::background(),
            Label {
                class: 1,
                center_x: rng.gen_range(-4.0..4.0),
                center_y: rng.gen_range(-4.0..4.0),
                bbox: [0.0; 4],
                concealed: true,
                visibility: 1,
            },
        ];
        for l in labels.iter_mut() {
            if l.is_ball() {
                l.bbox = [l.center_x, l.center_y, l.center_x, l.center_y];
            }
        }
        let weights = if heavy_quadrants {
            LossWeights::main_stage()
        } else {
            LossWeights {
                w_tp: 1.0,
                w_fp: 1.0,
                w_tn: 1.0,
                w_fn: 1.0,
                ..LossWeights::main_stage()
            }
        };
        let inst = CompositeInstance {
            graph,
            x,
            labels,
            weights,
        };
        if composite_instance_is_clean(&inst) {
            return inst;
        }
        attempt = attempt.wrapping_add(0x9E37_79B9);
    }
}

fn production_grads(inst: &CompositeInstance) -> (Tensor, Vec<Vec<Vec<f32>>>) {
    let mut gc = inst.graph.clone();
    let (out, caches) = run_layers_train(&mut gc.layers, &inst.x, 0.9).unwrap();
    let preds = predictions_from_raw(&out);
    let (_, grad) = composite_loss_grad(&preds, &inst.labels, &inst.weights).unwrap();
    backprop_layers(&gc.layers, &caches, grad).unwrap()
}

#[test]
fn fd_composite_loss_full_graph() {
    for i in 0..INSTANCES {
        let inst = make_composite_instance(0xB000 + i as u64, i % 2 == 1);
        let (input_grad, param_grads) = production_grads(&inst);
        let reference = ref_graph(&inst.graph);

        // Input gradient.
        let mut theta: Vec<f64> = inst.x.data().iter().map(|v| *v as f64).collect();
        let shape = inst.x.shape();
        fd_compare(
            &mut theta,
            input_grad.data(),
            |t| {
                let out = ref_graph_forward(&reference, &RefTensor::from_f64(shape, t.to_vec()));
                ref_composite_loss(&out, &inst.labels, &inst.weights)
            },
            "composite input",
        );

        // Every trainable parameter array of every layer.
        let xin = RefTensor::from_tensor(&inst.x);
        for li in 0..reference.len() {
            for ai in 0..reference[li].arrays.len() {
                let mut theta = reference[li].arrays[ai].clone();
                fd_compare(
                    &mut theta,
                    &param_grads[li][ai],
                    |t| {
                        let mut r2 = reference.to_vec();
                        r2[li].arrays[ai] = t.to_vec();
                        ref_composite_loss(
                            &ref_graph_forward(&r2, &xin),
                            &inst.labels,
                            &inst.weights,
                        )
                    },
                    &format!("composite layer {li} array {ai}"),
                );
            }
        }
    }
}
