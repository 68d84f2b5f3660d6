//! Two-stage early-exit inference: per-patch cascade classification,
//! frame-level processing with stop-on-detection, the analytic expected
//! cost model, and exit-threshold calibration.

use crate::data::{records_to_batch, PatchRecord};
use crate::error::{Error, Result};
use crate::graph::SplitModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct CascadeConfig {
    /// Continue to the tail only when the exit confidence reaches this.
    pub tau_ee: f32,
    /// Stop processing the frame once a patch reaches this confidence.
    pub tau_detect: f32,
    /// Final classification threshold.
    pub tau_accept: f32,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            tau_ee: 0.1,
            tau_detect: 0.9,
            tau_accept: 0.5,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_ee", self.tau_ee),
            ("tau_detect", self.tau_detect),
            ("tau_accept", self.tau_accept),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::parameter(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.tau_accept > self.tau_detect {
            return Err(Error::parameter(format!(
                "tau_accept {} exceeds tau_detect {}",
                self.tau_accept, self.tau_detect
            )));
        }
        Ok(())
    }
}

/// Outcome of one cascaded patch classification. An early exit always
/// classifies as background and carries no center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchDecision {
    pub is_ball: bool,
    pub confidence: f32,
    pub center: Option<(f32, f32)>,
    pub exited_early: bool,
    pub head_evaluated: bool,
    pub tail_evaluated: bool,
}

/// Run the cascade on a single 1x32x32x3 patch.
pub fn classify_patch_cascade(
    split: &SplitModel,
    patch: &Tensor,
    cfg: &CascadeConfig,
) -> Result<PatchDecision> {
    cfg.validate()?;
    if patch.batch() != 1 {
        return Err(Error::parameter(format!(
            "single-patch cascade got a batch of {}",
            patch.batch()
        )));
    }
    Ok(classify_batch_cascade(split, patch, cfg)?.remove(0))
}

/// Batched cascade: the head runs on every patch, the tail only on those
/// whose exit confidence reaches `tau_ee`.
pub fn classify_batch_cascade(
    split: &SplitModel,
    patches: &Tensor,
    cfg: &CascadeConfig,
) -> Result<Vec<PatchDecision>> {
    cfg.validate()?;
    let n = patches.batch();
    let (features, ee_conf) = split.head_forward(patches)?;
    let mut decisions: Vec<PatchDecision> = ee_conf
        .iter()
        .map(|conf| PatchDecision {
            is_ball: false,
            confidence: *conf,
            center: None,
            exited_early: *conf < cfg.tau_ee,
            head_evaluated: true,
            tail_evaluated: false,
        })
        .collect();

    let continuing: Vec<usize> = (0..n).filter(|i| !decisions[*i].exited_early).collect();
    if continuing.is_empty() {
        return Ok(decisions);
    }
    let [_, fh, fw, fc] = features.shape();
    let stride = fh * fw * fc;
    let mut sub = Vec::with_capacity(continuing.len() * stride);
    for &i in &continuing {
        sub.extend_from_slice(features.sample(i));
    }
    let sub = Tensor::from_vec([continuing.len(), fh, fw, fc], sub)?;
    let preds = split.tail_forward(&sub)?;
    for (&i, pred) in continuing.iter().zip(&preds) {
        let is_ball = pred.confidence >= cfg.tau_accept;
        decisions[i] = PatchDecision {
            is_ball,
            confidence: pred.confidence,
            center: is_ball.then_some((pred.x, pred.y)),
            exited_early: false,
            head_evaluated: true,
            tail_evaluated: true,
        };
    }
    Ok(decisions)
}

/// Frame-level outcome over an ordered hypothesis list.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    /// Winning detection (hypothesis index and its decision), if any.
    pub detection: Option<(usize, PatchDecision)>,
    pub patches_processed: usize,
    pub ee_trigger_count: usize,
    /// True when processing stopped at a high-confidence detection.
    pub stopped_on_detect: bool,
}

/// Evaluate hypotheses in order, stopping at the first patch whose
/// confidence reaches `tau_detect`; otherwise the maximum-confidence
/// positive wins.
pub fn process_frame(
    split: &SplitModel,
    patches: &Tensor,
    cfg: &CascadeConfig,
) -> Result<FrameResult> {
    cfg.validate()?;
    let [n, h, w, c] = patches.shape();
    let stride = h * w * c;
    process_frame_impl(n, cfg, |i| {
        let sample = Tensor::from_vec(
            [1, h, w, c],
            patches.data()[i * stride..(i + 1) * stride].to_vec(),
        )?;
        classify_patch_cascade(split, &sample, cfg)
    })
}

pub(crate) fn process_frame_impl(
    n: usize,
    cfg: &CascadeConfig,
    mut classify: impl FnMut(usize) -> Result<PatchDecision>,
) -> Result<FrameResult> {
    let mut best: Option<(usize, PatchDecision)> = None;
    let mut ee_trigger_count = 0;
    let mut processed = 0;
    for i in 0..n {
        let decision = classify(i)?;
        processed += 1;
        if decision.exited_early {
            ee_trigger_count += 1;
            continue;
        }
        if decision.is_ball && decision.confidence >= cfg.tau_detect {
            return Ok(FrameResult {
                detection: Some((i, decision)),
                patches_processed: processed,
                ee_trigger_count,
                stopped_on_detect: true,
            });
        }
        if decision.is_ball
            && best
                .as_ref()
                .is_none_or(|(_, b)| decision.confidence > b.confidence)
        {
            best = Some((i, decision));
        }
    }
    Ok(FrameResult {
        detection: best,
        patches_processed: processed,
        ee_trigger_count,
        stopped_on_detect: false,
    })
}

/// Expected per-patch time of the cascade as a mixture of the head-only
/// and full-path times.
pub fn expected_cost(p_exit: f64, t_head: f64, t_full_ee: f64) -> f64 {
    p_exit * t_head + (1.0 - p_exit) * t_full_ee
}

#[derive(Debug, Clone, Copy)]
pub struct Calibration {
    pub tau_ee: f32,
    pub exit_rate: f64,
    pub baseline_recall: f64,
    pub recall_drop_pp: f64,
}

/// Largest exit threshold whose end-to-end recall drop against a
/// non-exiting cascade stays within `max_recall_drop_pp` percentage points.
pub fn calibrate_exit_threshold(
    split: &SplitModel,
    records: &[PatchRecord],
    max_recall_drop_pp: f64,
    cfg: &CascadeConfig,
) -> Result<Calibration> {
    if records.is_empty() {
        return Err(Error::usage("calibration on an empty dataset"));
    }
    cfg.validate()?;
    // Per record: exit confidence, label, and whether the tail says ball.
    let mut entries: Vec<(f32, bool, bool)> = Vec::with_capacity(records.len());
    for chunk in records.chunks(crate::eval::EVAL_BATCH) {
        let refs: Vec<&PatchRecord> = chunk.iter().collect();
        let batch = records_to_batch(&refs);
        let (features, ee_conf) = split.head_forward(&batch)?;
        let preds = split.tail_forward(&features)?;
        for ((conf, pred), record) in ee_conf.iter().zip(&preds).zip(chunk) {
            entries.push((
                *conf,
                record.label.is_ball(),
                pred.confidence >= cfg.tau_accept,
            ));
        }
    }
    let positives = entries.iter().filter(|(_, y, _)| *y).count() as f64;
    if positives == 0.0 {
        return Err(Error::usage("calibration set has no positive records"));
    }
    let baseline_tp = entries.iter().filter(|(_, y, p)| *y && *p).count() as f64;
    let baseline_recall = baseline_tp / positives;

    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sweep candidate thresholds in ascending order; exits and lost true
    // positives grow monotonically with the threshold.
    let mut best: Option<Calibration> = None;
    let mut exited = 0usize;
    let mut lost_tp = 0usize;
    let mut i = 0;
    while i < entries.len() {
        // Candidate threshold: everything strictly below it exits. The
        // running counts cover exactly the entries consumed so far.
        let tau = entries[i].0;
        let drop_pp = lost_tp as f64 / positives * 100.0;
        if drop_pp <= max_recall_drop_pp {
            best = Some(Calibration {
                tau_ee: tau,
                exit_rate: exited as f64 / entries.len() as f64,
                baseline_recall,
                recall_drop_pp: drop_pp,
            });
        } else {
            break;
        }
        // Consume the run of equal confidences at tau.
        while i < entries.len() && entries[i].0 == tau {
            exited += 1;
            if entries[i].1 && entries[i].2 {
                lost_tp += 1;
            }
            i += 1;
        }
    }
    best.ok_or_else(|| Error::usage("no feasible exit threshold"))
}
