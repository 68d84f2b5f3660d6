//! Composite training loss: focal confidence loss plus Manhattan positional
//! loss, scaled per sample by label difficulty and by a confusion-matrix
//! quadrant weight recomputed from the current prediction.

use crate::data::Label;
use crate::error::{Error, Result};
use crate::graph::MainPrediction;
use crate::tensor::Tensor;

/// Probabilities are clamped to this range before taking logarithms.
pub const PROB_EPS: f32 = 1e-7;

/// Numerically stable logistic function, clamped into the open unit
/// interval so downstream log terms stay finite.
#[inline]
pub fn sigmoid(z: f32) -> f32 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Per-visibility-quartile and concealment multipliers for positive samples.
/// Negatives always weigh 1.0.
#[derive(Debug, Clone, Copy)]
pub struct DifficultyConfig {
    pub quartile: [f32; 4],
    pub concealed: f32,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        DifficultyConfig {
            quartile: [0.25, 0.5, 0.75, 1.0],
            concealed: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    /// Confidence-loss weight.
    pub w_c: f32,
    /// Positional-loss weight per pixel.
    pub w_p: f32,
    /// Focal exponent.
    pub gamma: f32,
    pub w_tp: f32,
    pub w_fp: f32,
    pub w_tn: f32,
    pub w_fn: f32,
    /// Decision threshold for quadrant assignment.
    pub t_q: f32,
    pub difficulty: DifficultyConfig,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::main_stage()
    }
}

impl LossWeights {
    /// Main-network training: heavy false-positive penalty.
    pub fn main_stage() -> Self {
        LossWeights {
            w_c: 1.0,
            w_p: 0.5,
            gamma: 2.0,
            w_tp: 1.0,
            w_fp: 1000.0,
            w_tn: 1.0,
            w_fn: 1.0,
            t_q: 0.5,
            difficulty: DifficultyConfig::default(),
        }
    }

    /// Early-exit training: confidence-only loss, heavy false-negative
    /// penalty so positives are never discarded early.
    pub fn ee_stage() -> Self {
        LossWeights {
            w_c: 1.0,
            w_p: 0.0,
            gamma: 2.0,
            w_tp: 1.0,
            w_fp: 1.0,
            w_tn: 1.0,
            w_fn: 100.0,
            t_q: 0.5,
            difficulty: DifficultyConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_c, self.w_p, self.gamma, self.w_tp, self.w_fp, self.w_tn, self.w_fn,
        ];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::parameter("loss weights must be finite and >= 0"));
        }
        if !(self.t_q > 0.0 && self.t_q < 1.0) {
            return Err(Error::parameter("t_q must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Focal loss for a binary label: with `p_t = p` if `y = 1` else `1 - p`,
/// the loss is `-(1 - p_t)^gamma * ln(p_t)`. `gamma = 0` reduces to binary
/// cross-entropy. `p` is clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn focal_loss(p: f32, y: bool, gamma: f32) -> f32 {
    focal_loss_grad(p, y, gamma).0
}

/// Focal loss and its derivative w.r.t. `p`.
pub fn focal_loss_grad(p: f32, y: bool, gamma: f32) -> (f32, f32) {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (pt, sign) = if y { (p, 1.0f32) } else { (1.0 - p, -1.0f32) };
    let one_minus = 1.0 - pt;
    let focus = if gamma == 0.0 { 1.0 } else { one_minus.powf(gamma) };
    let loss = -focus * pt.ln();
    // dL/dp_t = gamma * (1-p_t)^(gamma-1) * ln(p_t) - (1-p_t)^gamma / p_t
    let dpt = if gamma == 0.0 {
        -1.0 / pt
    } else {
        gamma * one_minus.powf(gamma - 1.0) * pt.ln() - focus / pt
    };
    (loss, dpt * sign)
}

/// Manhattan distance between predicted and target centers, in pixels.
pub fn positional_loss(pred: (f32, f32), target: (f32, f32)) -> f32 {
    (pred.0 - target.0).abs() + (pred.1 - target.1).abs()
}

/// Difficulty multiplier: clearly visible positives weigh the most, heavily
/// truncated or concealed ones the least; negatives are neutral.
pub fn sample_difficulty_weight(label: &Label, cfg: &DifficultyConfig) -> f32 {
    if !label.is_ball() {
        return 1.0;
    }
    let base = cfg.quartile[label.visibility as usize & 3];
    if label.concealed {
        base * cfg.concealed
    } else {
        base
    }
}

/// Confusion-matrix quadrant multiplier for the current prediction.
pub fn quadrant_weight(p: f32, y: bool, w: &LossWeights) -> f32 {
    let predicted_positive = p >= w.t_q;
    match (y, predicted_positive) {
        (true, true) => w.w_tp,
        (false, true) => w.w_fp,
        (false, false) => w.w_tn,
        (true, false) => w.w_fn,
    }
}

/// Per-sample contribution to the composite loss.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss {
    pub difficulty: f32,
    pub quadrant: f32,
    pub focal: f32,
    pub positional: f32,
    /// difficulty * quadrant * (w_c * focal + w_p * positional)
    pub weighted: f32,
}

/// Composite loss over a batch: mean of
/// `difficulty * quadrant * (w_c * focal + w_p * manhattan * [y = 1])`.
/// The positional term is masked to positive-labeled samples.
pub fn composite_loss(
    preds: &[MainPrediction],
    labels: &[Label],
    w: &LossWeights,
) -> Result<(f32, Vec<SampleLoss>)> {
    let (loss, samples, _) = composite_loss_inner(preds, labels, w, false)?;
    Ok((loss, samples))
}

/// Composite loss plus the gradient w.r.t. the raw head outputs
/// (confidence logit, x, y), laid out as a (batch, 1, 1, 3) tensor.
pub fn composite_loss_grad(
    preds: &[MainPrediction],
    labels: &[Label],
    w: &LossWeights,
) -> Result<(f32, Tensor)> {
    let (loss, _, grad) = composite_loss_inner(preds, labels, w, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn composite_loss_inner(
    preds: &[MainPrediction],
    labels: &[Label],
    w: &LossWeights,
    want_grad: bool,
) -> Result<(f32, Vec<SampleLoss>, Option<Tensor>)> {
    if preds.len() != labels.len() {
        return Err(Error::parameter(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::parameter("composite loss on empty batch"));
    }
    w.validate()?;
    let n = preds.len();
    let mut grad = want_grad.then(|| Tensor::zeros([n, 1, 1, 3]));
    let mut samples = Vec::with_capacity(n);
    let mut total = 0.0f64;
    for (i, (pred, label)) in preds.iter().zip(labels).enumerate() {
        let y = label.is_ball();
        let difficulty = sample_difficulty_weight(label, &w.difficulty);
        let quadrant = quadrant_weight(pred.confidence, y, w);
        let (focal, dfocal_dp) = focal_loss_grad(pred.confidence, y, w.gamma);
        let positional = if y {
            positional_loss((pred.x, pred.y), (label.center_x, label.center_y))
        } else {
            0.0
        };
        let weighted = difficulty * quadrant * (w.w_c * focal + w.w_p * positional);
        total += weighted as f64;
        samples.push(SampleLoss {
            difficulty,
            quadrant,
            focal,
            positional,
            weighted,
        });
        if let Some(g) = grad.as_mut() {
            let scale = difficulty * quadrant / n as f32;
            // d(sigmoid)/dz at the clamped probability.
            let sig = pred.confidence * (1.0 - pred.confidence);
            let gz = scale * w.w_c * dfocal_dp * sig;
            let (gx, gy) = if y {
                (
                    scale * w.w_p * (pred.x - label.center_x).signum(),
                    scale * w.w_p * (pred.y - label.center_y).signum(),
                )
            } else {
                (0.0, 0.0)
            };
            let base = i * 3;
            g.data_mut()[base] = gz;
            g.data_mut()[base + 1] = if gx.is_finite() { gx } else { 0.0 };
            g.data_mut()[base + 2] = if gy.is_finite() { gy } else { 0.0 };
        }
    }
    Ok((total as f32 / n as f32, samples, grad))
}

/// Confidence-only variant for the early-exit head (single-logit output).
/// Returns the loss and the gradient w.r.t. each raw logit.
pub fn confidence_loss_grad(
    confs: &[f32],
    labels: &[Label],
    w: &LossWeights,
) -> Result<(f32, Vec<f32>)> {
    if confs.len() != labels.len() {
        return Err(Error::parameter(format!(
            "{} confidences vs {} labels",
            confs.len(),
            labels.len()
        )));
    }
    if confs.is_empty() {
        return Err(Error::parameter("confidence loss on empty batch"));
    }
    w.validate()?;
    let n = confs.len();
    let mut grad = vec![0.0f32; n];
    let mut total = 0.0f64;
    for (i, (p, label)) in confs.iter().zip(labels).enumerate() {
        let y = label.is_ball();
        let difficulty = sample_difficulty_weight(label, &w.difficulty);
        let quadrant = quadrant_weight(*p, y, w);
        let (focal, dfocal_dp) = focal_loss_grad(*p, y, w.gamma);
        total += (difficulty * quadrant * w.w_c * focal) as f64;
        let sig = *p * (1.0 - *p);
        grad[i] = difficulty * quadrant * w.w_c * dfocal_dp * sig / n as f32;
    }
    Ok((total as f32 / n as f32, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;

    fn ball_label(cx: f32, cy: f32, visibility: u8, concealed: bool) -> Label {
        Label {
            class: 1,
            center_x: cx,
            center_y: cy,
            bbox: [cx - 5.0, cy - 5.0, cx + 5.0, cy + 5.0],
            concealed,
            visibility,
        }
    }

    fn pred(confidence: f32, x: f32, y: f32) -> MainPrediction {
        MainPrediction { confidence, x, y }
    }

    #[test]
    fn focal_reduces_to_bce_at_gamma_zero() {
        let loss = focal_loss(0.5, true, 0.0);
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn focal_direct_evaluation() {
        // (1-0.9)^2 * (-ln 0.9) = 0.01 * 0.1053605...
        let loss = focal_loss(0.9, true, 2.0);
        assert!((loss - 0.0010536).abs() < 1e-6);
    }

    #[test]
    fn focal_vanishes_and_decreases_toward_confident_truth() {
        let mut prev = f32::INFINITY;
        for i in 1..100 {
            let p = i as f32 / 100.0;
            let l = focal_loss(p, true, 2.0);
            assert!(l < prev, "focal loss not strictly decreasing at p={p}");
            prev = l;
        }
        assert!(focal_loss(1.0 - 1e-7, true, 2.0) < 1e-9);
    }

    #[test]
    fn positional_loss_examples() {
        assert_eq!(positional_loss((10.0, 12.0), (8.0, 15.0)), 5.0);
        assert_eq!(positional_loss((3.0, 4.0), (3.0, 4.0)), 0.0);
        for s in 0..50 {
            let a = ((s * 7 % 13) as f32, (s * 5 % 11) as f32);
            let b = ((s * 3 % 17) as f32, (s * 11 % 7) as f32);
            assert_eq!(positional_loss(a, b), positional_loss(b, a));
        }
    }

    #[test]
    fn difficulty_weight_examples() {
        let cfg = DifficultyConfig::default();
        assert_eq!(sample_difficulty_weight(&ball_label(0.0, 0.0, 3, false), &cfg), 1.0);
        assert_eq!(sample_difficulty_weight(&ball_label(0.0, 0.0, 0, false), &cfg), 0.25);
        assert_eq!(sample_difficulty_weight(&ball_label(0.0, 0.0, 3, true), &cfg), 0.5);
        assert_eq!(sample_difficulty_weight(&Label::background(), &cfg), 1.0);
    }

    #[test]
    fn quadrant_weight_examples() {
        let main = LossWeights::main_stage();
        assert_eq!(quadrant_weight(0.8, false, &main), 1000.0);
        assert_eq!(quadrant_weight(0.9, true, &main), 1.0);
        let ee = LossWeights::ee_stage();
        assert_eq!(quadrant_weight(0.3, true, &ee), 100.0);
    }

    #[test]
    fn composite_example_value() {
        // focal part 0.2, manhattan 4, all multipliers 1, y=1:
        // 1.0 * 0.2 + 0.5 * 4 = 2.2
        let mut w = LossWeights::main_stage();
        w.w_tp = 1.0;
        // Find p with focal = 0.2 via bisection to feed the example.
        let (mut lo, mut hi) = (0.05f32, 0.95f32);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if focal_loss(mid, true, w.gamma) > 0.2 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let p = 0.5 * (lo + hi);
        let label = ball_label(10.0, 10.0, 3, false);
        let preds = [pred(p, 13.0, 11.0)]; // manhattan = 3 + 1 = 4
        let (loss, samples) = composite_loss(&preds, &[label], &w).unwrap();
        assert!((loss - 2.2).abs() < 1e-3, "loss {loss}");
        assert!((samples[0].positional - 4.0).abs() < 1e-6);
    }

    #[test]
    fn negative_samples_ignore_position_outputs() {
        let w = LossWeights::main_stage();
        let label = Label::background();
        let (a, _) = composite_loss(&[pred(0.2, 0.0, 0.0)], &[label.clone()], &w).unwrap();
        let (b, _) = composite_loss(&[pred(0.2, 500.0, -31.0)], &[label], &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fp_weight_scales_exactly_the_fp_quadrant() {
        let mut w = LossWeights::main_stage();
        w.w_fp = 1.0;
        let labels = vec![
            Label::background(),              // p >= t_q: FP quadrant
            Label::background(),              // p < t_q: TN quadrant
            ball_label(5.0, 5.0, 3, false),   // TP quadrant
        ];
        let preds = [pred(0.8, 0.0, 0.0), pred(0.2, 0.0, 0.0), pred(0.9, 5.0, 5.0)];
        let (_, base) = composite_loss(&preds, &labels, &w).unwrap();
        w.w_fp = 7.0;
        let (_, scaled) = composite_loss(&preds, &labels, &w).unwrap();
        assert!((scaled[0].weighted - 7.0 * base[0].weighted).abs() < 1e-6);
        assert_eq!(scaled[1].weighted, base[1].weighted);
        assert_eq!(scaled[2].weighted, base[2].weighted);
    }

    #[test]
    fn composite_loss_is_nonnegative() {
        let w = LossWeights::main_stage();
        for s in 0..200 {
            let p = (s as f32 * 0.005).clamp(1e-6, 1.0 - 1e-6);
            let label = if s % 2 == 0 {
                Label::background()
            } else {
                ball_label((s % 32) as f32, (s % 17) as f32, (s % 4) as u8, s % 3 == 0)
            };
            let (loss, _) = composite_loss(&[pred(p, 1.0, 2.0)], &[label], &w).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn batch_size_mismatch_is_parameter_error() {
        let w = LossWeights::main_stage();
        let r = composite_loss(&[pred(0.5, 0.0, 0.0)], &[], &w);
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn sigmoid_stays_in_open_interval() {
        for z in [-1e9f32, -40.0, -1.0, 0.0, 1.0, 40.0, 1e9] {
            let p = sigmoid(z);
            assert!(p > 0.0 && p < 1.0, "sigmoid({z}) = {p}");
        }
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
