use serde::{Deserialize, Serialize};

use super::HeadOutputs;
use crate::geometry::AnchorTargets;
use crate::nn::sigmoid;

/// Weight on the objectness and box terms; the repetition term has weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 1.0 }
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Binary cross entropy on a probability, clamped away from 0 and 1.
pub fn bce(y: f64, target: f64) -> f64 {
    let y = y.clamp(1e-12, 1.0 - 1e-12);
    -(target * y.ln() + (1.0 - target) * (1.0 - y).ln())
}

/// Binary cross entropy of `sigmoid(logit)`, in a form that never overflows.
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub objectness: f64,
    pub boxes: f64,
    pub repetition: f64,
}

/// Mean over the sampled anchors of
/// `lambda * BCE + lambda * smoothL1(box) + smoothL1(repetition)`, with the box term limited to anchors that have a
/// regression target and the repetition term to anchors whose target is defined.
///
/// Returns the loss and its gradient with respect to the raw head outputs.
pub fn reprpn_loss(out: &HeadOutputs, targets: &AnchorTargets, sampled: &[usize], w: LossWeights) -> (LossBreakdown, HeadOutputs) {
    let mut grad = out.zeros_like();
    if sampled.is_empty() {
        return (LossBreakdown::default(), grad);
    }
    let k = out.per_location();
    let norm = 1.0 / sampled.len() as f64;
    let mut parts = LossBreakdown::default();
    for &i in sampled {
        let t = &targets.targets[i];
        let (loc, a) = (i / k, i % k);
        let y_star = match t.label {
            crate::geometry::AnchorLabel::Positive => 1.0,
            crate::geometry::AnchorLabel::Negative => 0.0,
            crate::geometry::AnchorLabel::Ignore => continue,
        };
        let logit = out.logits[[loc, a]];
        parts.objectness += w.lambda * bce_with_logits(logit, y_star) * norm;
        grad.logits[[loc, a]] += w.lambda * (sigmoid(logit) - y_star) * norm;

        if let Some(delta) = t.delta {
            for (j, target) in delta.as_array().into_iter().enumerate() {
                let diff = out.deltas[[loc, 4 * a + j]] - target;
                parts.boxes += w.lambda * smooth_l1(diff) * norm;
                grad.deltas[[loc, 4 * a + j]] += w.lambda * smooth_l1_grad(diff) * norm;
            }
        }
        if let Some(c_star) = t.repetition {
            let diff = out.repetition[[loc, a]] - c_star;
            parts.repetition += smooth_l1(diff) * norm;
            grad.repetition[[loc, a]] += smooth_l1_grad(diff) * norm;
        }
    }
    parts.total = parts.objectness + parts.boxes + parts.repetition;
    (parts, grad)
}
