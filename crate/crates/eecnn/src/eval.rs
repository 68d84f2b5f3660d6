//! Evaluation: confusion-matrix metrics, center-deviation statistics, and
//! early-exit trigger accounting over labeled datasets.

use crate::cascade::{classify_batch_cascade, CascadeConfig};
use crate::data::{records_to_batch, PatchRecord};
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, SplitModel};

pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionMatrix { tp, fp, tn, fn_ }
    }

    pub fn record(&mut self, actual: bool, predicted: bool) {
        match (actual, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    /// True when no positive prediction was made; precision is then
    /// reported as 1.0 by convention.
    pub fn precision_undefined(&self) -> bool {
        self.tp + self.fp == 0
    }

    pub fn precision(&self) -> f64 {
        if self.precision_undefined() {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.positives() == 0 {
            1.0
        } else {
            self.tp as f64 / self.positives() as f64
        }
    }
}

/// Deviation between predicted and labeled centers over true positives.
#[derive(Debug, Clone, Copy, Default)]
pub struct CenterStats {
    pub count: u64,
    pub euclid_mean: f64,
    pub euclid_std: f64,
    pub manhattan_mean: f64,
    pub manhattan_std: f64,
}

#[derive(Debug, Default)]
struct CenterAccum {
    euclid: Vec<f64>,
    manhattan: Vec<f64>,
}

impl CenterAccum {
    fn push(&mut self, pred: (f32, f32), target: (f32, f32)) {
        let dx = (pred.0 - target.0) as f64;
        let dy = (pred.1 - target.1) as f64;
        self.euclid.push((dx * dx + dy * dy).sqrt());
        self.manhattan.push(dx.abs() + dy.abs());
    }

    fn finish(self) -> CenterStats {
        let (em, es) = mean_std(&self.euclid);
        let (mm, ms) = mean_std(&self.manhattan);
        CenterStats {
            count: self.euclid.len() as u64,
            euclid_mean: em,
            euclid_std: es,
            manhattan_mean: mm,
            manhattan_std: ms,
        }
    }
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy)]
pub struct EeStats {
    pub triggers: u64,
    pub total: u64,
}

impl EeStats {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.triggers as f64 / self.total as f64
        }
    }
}

#[derive(Debug)]
pub struct EvalReport {
    pub cm: ConfusionMatrix,
    pub center: CenterStats,
    pub ee: Option<EeStats>,
}

/// Evaluate the plain model: positive when the main-head confidence
/// reaches `tau_accept`.
pub fn evaluate_model(
    g: &ModelGraph,
    records: &[PatchRecord],
    tau_accept: f32,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::usage("evaluation on an empty dataset"));
    }
    let mut cm = ConfusionMatrix::default();
    let mut centers = CenterAccum::default();
    for chunk in records.chunks(EVAL_BATCH) {
        let refs: Vec<&PatchRecord> = chunk.iter().collect();
        let batch = records_to_batch(&refs);
        let preds = g.forward_main(&batch)?;
        for (pred, record) in preds.iter().zip(chunk) {
            let actual = record.label.is_ball();
            let predicted = pred.confidence >= tau_accept;
            cm.record(actual, predicted);
            if actual && predicted {
                centers.push(
                    (pred.x, pred.y),
                    (record.label.center_x, record.label.center_y),
                );
            }
        }
    }
    Ok(EvalReport {
        cm,
        center: centers.finish(),
        ee: None,
    })
}

/// Evaluate the split cascade: early-exited patches count as background.
pub fn evaluate_cascade(
    split: &SplitModel,
    records: &[PatchRecord],
    cfg: &CascadeConfig,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::usage("evaluation on an empty dataset"));
    }
    let mut cm = ConfusionMatrix::default();
    let mut centers = CenterAccum::default();
    let mut triggers = 0u64;
    for chunk in records.chunks(EVAL_BATCH) {
        let refs: Vec<&PatchRecord> = chunk.iter().collect();
        let batch = records_to_batch(&refs);
        let decisions = classify_batch_cascade(split, &batch, cfg)?;
        for (decision, record) in decisions.iter().zip(chunk) {
            let actual = record.label.is_ball();
            cm.record(actual, decision.is_ball);
            if decision.exited_early {
                triggers += 1;
            }
            if actual && decision.is_ball {
                if let Some(center) = decision.center {
                    centers.push(center, (record.label.center_x, record.label.center_y));
                }
            }
        }
    }
    Ok(EvalReport {
        cm,
        center: centers.finish(),
        ee: Some(EeStats {
            triggers,
            total: records.len() as u64,
        }),
    })
}

/// Recall change from `a` to `b` in percentage points, plus the relative
/// true-positive change.
#[derive(Debug, Clone, Copy)]
pub struct RecallDelta {
    pub recall_pp: f64,
    pub tp_relative: f64,
}

pub fn recall_delta(a: &ConfusionMatrix, b: &ConfusionMatrix) -> Result<RecallDelta> {
    if a.total() != b.total() || a.positives() != b.positives() {
        return Err(Error::usage(format!(
            "confusion matrices cover different datasets ({} / {} records, {} / {} positives)",
            a.total(),
            b.total(),
            a.positives(),
            b.positives()
        )));
    }
    let recall_pp = (b.recall() - a.recall()) * 100.0;
    let tp_relative = if a.tp == 0 {
        0.0
    } else {
        (b.tp as f64 - a.tp as f64) / a.tp as f64
    };
    Ok(RecallDelta {
        recall_pp,
        tp_relative,
    })
}
