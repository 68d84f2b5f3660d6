//! Two-stage training: the full network against the composite loss, then
//! the early-exit head alone on a frozen trunk. Deterministic under a
//! fixed seed; batches, augmentation draws, and update order all derive
//! from one seeded generator.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{AugmentDraw, AugmentPhase};
use crate::data::{records_to_batch, Label, PatchRecord, PATCH_PIXELS};
use crate::error::{Error, Result};
use crate::graph::{backprop_layers, predictions_from_raw, run_layers_train, ModelGraph};
use crate::loss::{composite_loss, composite_loss_grad, confidence_loss_grad, LossWeights};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::weights_io::save_weights;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// Moving-average momentum for batchnorm statistics.
    pub bn_momentum: f32,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    /// First epoch of augmentation phase 2; defaults to `epochs / 3`.
    pub phase_boundary: Option<usize>,
    pub augment: bool,
    /// Save a checkpoint every N epochs into `checkpoint_dir` (0 = never).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            seed: 0,
            optimizer: AdamConfig::default(),
            bn_momentum: 0.9,
            patience: 10,
            phase_boundary: None,
            augment: true,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::parameter("batch size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::parameter("epoch count must be >= 1"));
        }
        if let Some(e1) = self.phase_boundary {
            if e1 > self.epochs {
                return Err(Error::parameter("phase boundary exceeds epoch count"));
            }
        }
        Ok(())
    }

    fn phase_for(&self, epoch: usize) -> AugmentPhase {
        let boundary = self.phase_boundary.unwrap_or(self.epochs / 3);
        if epoch < boundary {
            AugmentPhase::Phase1
        } else {
            AugmentPhase::Phase2
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub learning_rate: f32,
    pub phase: u8,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_precision,val_recall,lr,phase\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                e.epoch, e.train_loss, e.val_loss, e.val_precision, e.val_recall,
                e.learning_rate, e.phase
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn check_datasets(train: &[PatchRecord], val: &[PatchRecord]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::usage("training requires non-empty train and validation sets"));
    }
    Ok(())
}

/// Assemble one augmented training batch.
fn build_batch(
    records: &[PatchRecord],
    indices: &[usize],
    augment: Option<(AugmentPhase, &mut ChaCha8Rng)>,
) -> (Tensor, Vec<Label>) {
    let n = indices.len();
    let mut data = Vec::with_capacity(n * PATCH_PIXELS);
    let mut labels = Vec::with_capacity(n);
    match augment {
        Some((phase, rng)) => {
            for &i in indices {
                let record = &records[i];
                let pixels = record.to_f32();
                let draw = AugmentDraw::sample(phase, rng);
                let (pixels, label) = draw.apply(&pixels, &record.label);
                data.extend_from_slice(&pixels);
                labels.push(label);
            }
        }
        None => {
            for &i in indices {
                let record = &records[i];
                data.extend(record.pixels.iter().map(|b| *b as f32 / 255.0));
                labels.push(record.label.clone());
            }
        }
    }
    let batch = Tensor::from_vec([n, 32, 32, 3], data).expect("batch assembly is shape-exact");
    (batch, labels)
}

/// Validation pass: composite loss plus precision/recall at the quadrant
/// threshold, without augmentation, in inference mode.
pub fn validate_main(
    g: &ModelGraph,
    records: &[PatchRecord],
    weights: &LossWeights,
) -> Result<(f64, f64, f64)> {
    let mut cm = crate::eval::ConfusionMatrix::default();
    let mut loss_sum = 0.0f64;
    let mut count = 0usize;
    for chunk in records.chunks(crate::eval::EVAL_BATCH) {
        let refs: Vec<&PatchRecord> = chunk.iter().collect();
        let batch = records_to_batch(&refs);
        let preds = g.forward_main(&batch)?;
        let labels: Vec<Label> = chunk.iter().map(|r| r.label.clone()).collect();
        let (loss, _) = composite_loss(&preds, &labels, weights)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        count += chunk.len();
        for (pred, record) in preds.iter().zip(chunk) {
            cm.record(record.label.is_ball(), pred.confidence >= weights.t_q);
        }
    }
    Ok((loss_sum / count as f64, cm.precision(), cm.recall()))
}

fn validate_ee(
    g: &ModelGraph,
    records: &[PatchRecord],
    weights: &LossWeights,
) -> Result<(f64, f64, f64)> {
    let mut cm = crate::eval::ConfusionMatrix::default();
    let mut loss_sum = 0.0f64;
    let mut count = 0usize;
    for chunk in records.chunks(crate::eval::EVAL_BATCH) {
        let refs: Vec<&PatchRecord> = chunk.iter().collect();
        let batch = records_to_batch(&refs);
        let confs = g.forward_ee(&batch)?;
        let labels: Vec<Label> = chunk.iter().map(|r| r.label.clone()).collect();
        let (loss, _) = confidence_loss_grad(&confs, &labels, weights)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        count += chunk.len();
        for (conf, record) in confs.iter().zip(chunk) {
            cm.record(record.label.is_ball(), *conf >= weights.t_q);
        }
    }
    Ok((loss_sum / count as f64, cm.precision(), cm.recall()))
}

fn maybe_checkpoint(g: &ModelGraph, cfg: &TrainConfig, epoch: usize) -> Result<()> {
    if cfg.checkpoint_every == 0 || (epoch + 1) % cfg.checkpoint_every != 0 {
        return Ok(());
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        save_weights(g, dir.join(format!("epoch_{epoch:04}.eew")))?;
    }
    Ok(())
}

/// Train the full network against the composite loss with the
/// augmentation schedule, early-stopping on validation loss and restoring
/// the best weights.
pub fn train_main(
    g: &mut ModelGraph,
    train: &[PatchRecord],
    val: &[PatchRecord],
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    check_datasets(train, val)?;
    cfg.validate()?;
    weights.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.optimizer);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelGraph)> = None;
    let mut stale = 0usize;

    let mut indices: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let phase = cfg.phase_for(epoch);
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in indices.chunks(cfg.batch_size) {
            let (batch, labels) = build_batch(
                train,
                chunk,
                cfg.augment.then_some((phase, &mut rng)),
            );
            let (out, caches) = run_layers_train(&mut g.layers, &batch, cfg.bn_momentum)?;
            let preds = predictions_from_raw(&out);
            let (loss, grad) = composite_loss_grad(&preds, &labels, weights)?;
            let (_, mut param_grads) = backprop_layers(&g.layers, &caches, grad)?;
            clip_global_norm(&mut param_grads, cfg.optimizer.clip_norm);
            adam.step(&mut g.layers, &param_grads);
            loss_sum += loss as f64 * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_loss, val_precision, val_recall) = validate_main(g, val, weights)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_precision,
            val_recall,
            learning_rate: cfg.optimizer.learning_rate,
            phase: if phase == AugmentPhase::Phase1 { 1 } else { 2 },
        });
        maybe_checkpoint(g, cfg, epoch)?;

        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, g.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, snapshot)) = best {
        *g = snapshot;
    }
    Ok(history)
}

/// Train only the early-exit head on a frozen trunk with the
/// confidence-only loss.
pub fn train_early_exit(
    g: &mut ModelGraph,
    train: &[PatchRecord],
    val: &[PatchRecord],
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    check_datasets(train, val)?;
    cfg.validate()?;
    weights.validate()?;
    if !g.has_early_exit() {
        return Err(Error::usage("early-exit training requires an attached exit"));
    }
    if !g.trunk_is_frozen() {
        return Err(Error::usage("early-exit training requires a frozen trunk"));
    }
    let tap = g.ee_tap.expect("exit presence checked above");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.optimizer);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Vec<crate::graph::Layer>)> = None;
    let mut stale = 0usize;

    let mut indices: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let phase = cfg.phase_for(epoch);
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in indices.chunks(cfg.batch_size) {
            let (batch, labels) = build_batch(
                train,
                chunk,
                cfg.augment.then_some((phase, &mut rng)),
            );
            // Frozen trunk: plain inference up to the tap.
            let mut features = batch;
            for layer in &g.layers[..=tap] {
                features = crate::layers::forward(&layer.params, &features)?;
            }
            let (out, caches) = run_layers_train(&mut g.ee_layers, &features, cfg.bn_momentum)?;
            let confs: Vec<f32> = out.data().iter().map(|z| crate::loss::sigmoid(*z)).collect();
            let (loss, dz) = confidence_loss_grad(&confs, &labels, weights)?;
            let grad = Tensor::from_vec([chunk.len(), 1, 1, 1], dz)?;
            let (_, mut param_grads) = backprop_layers(&g.ee_layers, &caches, grad)?;
            clip_global_norm(&mut param_grads, cfg.optimizer.clip_norm);
            adam.step(&mut g.ee_layers, &param_grads);
            loss_sum += loss as f64 * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_loss, val_precision, val_recall) = validate_ee(g, val, weights)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_precision,
            val_recall,
            learning_rate: cfg.optimizer.learning_rate,
            phase: if phase == AugmentPhase::Phase1 { 1 } else { 2 },
        });
        maybe_checkpoint(g, cfg, epoch)?;

        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, g.ee_layers.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, snapshot)) = best {
        g.ee_layers = snapshot;
    }
    Ok(history)
}
