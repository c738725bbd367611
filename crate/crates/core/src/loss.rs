//! Classification losses with label smoothing and the composite detection loss.
//!
//! Class indices are zero-based throughout.

use crate::boxes::{
    self, encode, head_channel, non_responsible_target, raw_prediction, shape_iou, BBox, GridSpec,
    GroundTruth, ObjectnessTarget, DEFAULT_IGNORE_THRESHOLD,
};
use crate::tensor::{sigmoid_scalar, Real, ShapeError, Tensor};

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_EPSILON: f64 = 0.1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("class label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("smoothing epsilon {0} outside [0, 1]")]
    EpsilonOutOfRange(f64),
    #[error("distribution lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("ground truth {index} rejected: {reason}")]
    BadGroundTruth { index: usize, reason: String },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Label-smoothing configuration: smoothing strength and class count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsrConfig {
    epsilon: f64,
    num_classes: usize,
}

impl LsrConfig {
    pub fn new(epsilon: f64, num_classes: usize) -> Result<Self, LossError> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(LossError::EpsilonOutOfRange(epsilon));
        }
        if num_classes == 0 {
            return Err(LossError::LabelOutOfRange {
                label: 0,
                num_classes,
            });
        }
        Ok(Self { epsilon, num_classes })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn check_label(&self, y: usize) -> Result<(), LossError> {
        if y >= self.num_classes {
            return Err(LossError::LabelOutOfRange {
                label: y,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }
}

/// One-hot ground-truth distribution.
pub fn hard_target(num_classes: usize, y: usize) -> Result<Vec<f64>, LossError> {
    if y >= num_classes {
        return Err(LossError::LabelOutOfRange { label: y, num_classes });
    }
    Ok((0..num_classes).map(|k| if k == y { 1.0 } else { 0.0 }).collect())
}

/// Smoothed distribution: `eps / K` off-label, `1 - eps + eps / K` on-label.
pub fn lsr_target(cfg: &LsrConfig, y: usize) -> Result<Vec<f64>, LossError> {
    cfg.check_label(y)?;
    let k = cfg.num_classes as f64;
    let off = cfg.epsilon / k;
    let on = 1.0 - cfg.epsilon + off;
    Ok((0..cfg.num_classes).map(|i| if i == y { on } else { off }).collect())
}

#[inline]
fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// `-sum_k q(k) ln p(k)`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64, LossError> {
    if p.len() != q.len() {
        return Err(LossError::LengthMismatch(p.len(), q.len()));
    }
    Ok(-p.iter().zip(q).map(|(&pk, &qk)| qk * floored_ln(pk)).sum::<f64>())
}

/// Closed-form smoothed loss `-(1 - eps) ln p(y) - (eps / K) sum_k ln p(k)`.
pub fn lsr_loss(p: &[f64], y: usize, cfg: &LsrConfig) -> Result<f64, LossError> {
    if p.len() != cfg.num_classes {
        return Err(LossError::LengthMismatch(p.len(), cfg.num_classes));
    }
    cfg.check_label(y)?;
    let eps = cfg.epsilon;
    let sum_ln: f64 = p.iter().map(|&pk| floored_ln(pk)).sum();
    Ok(-(1.0 - eps) * floored_ln(p[y]) - eps / cfg.num_classes as f64 * sum_ln)
}

/// Binary cross-entropy of `sigmoid(logit)` against target `t`, computed from the logit.
#[inline]
pub fn bce_with_logit(logit: f64, t: f64) -> f64 {
    logit.max(0.0) - logit * t + (-logit.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Objectness where an object is present.
    pub obj: f64,
    /// Objectness where no object is present.
    pub noobj: f64,
    pub class_w: f64,
    pub coord: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            obj: 5.0,
            noobj: 1.0,
            class_w: 1.0,
            coord: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub coord_loss: f64,
    pub obj_loss: f64,
    pub noobj_loss: f64,
    pub class_loss: f64,
    pub total: f64,
    pub positives: usize,
    pub ignored: usize,
    pub negatives: usize,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.coord * self.coord_loss + w.obj * self.obj_loss + w.noobj * self.noobj_loss + w.class_w * self.class_loss
    }

    /// Term-wise sum; counts add.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.coord_loss += other.coord_loss;
        self.obj_loss += other.obj_loss;
        self.noobj_loss += other.noobj_loss;
        self.class_loss += other.class_loss;
        self.total += other.total;
        self.positives += other.positives;
        self.ignored += other.ignored;
        self.negatives += other.negatives;
    }

    /// Loss terms multiplied by `s`; counts unchanged.
    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            coord_loss: self.coord_loss * s,
            obj_loss: self.obj_loss * s,
            noobj_loss: self.noobj_loss * s,
            class_loss: self.class_loss * s,
            total: self.total * s,
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.coord_loss, self.obj_loss, self.noobj_loss, self.class_loss, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Static description of the detection head a loss is evaluated against.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayout<'a> {
    pub anchors: &'a [(f64, f64)],
    pub grid: GridSpec,
    pub num_classes: usize,
}

/// The `(cell, anchor)` slot responsible for each ground truth: the cell
/// containing its center, and the anchor whose shape overlaps it best.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub gt_index: usize,
    pub cell: (usize, usize),
    pub anchor: usize,
    /// Ground truth in grid units `(cx, cy, w, h)`.
    pub grid_box: (f64, f64, f64, f64),
}

pub fn assign_responsible(gts: &[GroundTruth], head: &HeadLayout<'_>) -> Result<Vec<Assignment>, LossError> {
    let s = head.grid.size as f64;
    let mut out: Vec<Assignment> = Vec::with_capacity(gts.len());
    for (index, gt) in gts.iter().enumerate() {
        let bad = |reason: &str| LossError::BadGroundTruth {
            index,
            reason: reason.to_string(),
        };
        if gt.class_id >= head.num_classes {
            return Err(bad("class id out of range"));
        }
        let (cx, cy) = gt.bbox.center();
        if !((0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy)) {
            return Err(bad("center outside the image"));
        }
        let (w, h) = (gt.bbox.width(), gt.bbox.height());
        if !(w > 0.0 && h > 0.0) {
            return Err(bad("non-positive size"));
        }
        let grid_box = (cx * s, cy * s, w * s, h * s);
        let cell = head.grid.cell_of(grid_box.0, grid_box.1);
        let mut anchor = 0;
        let mut best = f64::NEG_INFINITY;
        for (a, &prior) in head.anchors.iter().enumerate() {
            let v = shape_iou((grid_box.2, grid_box.3), prior);
            if v > best {
                best = v;
                anchor = a;
            }
        }
        // The first ground truth claiming a slot keeps it.
        if out.iter().any(|o| o.cell == cell && o.anchor == anchor) {
            continue;
        }
        out.push(Assignment {
            gt_index: index,
            cell,
            anchor,
            grid_box,
        });
    }
    Ok(out)
}

/// Which objectness rule applied to each `(cell, anchor)` slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TargetMask(pub Vec<u8>);

fn check_head<T: Real>(raw: &Tensor<T>, head: &HeadLayout<'_>) -> Result<(), LossError> {
    let expected = (head.anchors.len() * (5 + head.num_classes), head.grid.size, head.grid.size);
    raw.expect_shape("detection_loss", "raw head", expected)?;
    Ok(())
}

/// Composite detection loss for one image and its gradient with respect to the raw head.
///
/// Responsible slots get squared error on `(t_x, t_y, t_w, t_h)` against the
/// encoded ground truth, objectness cross-entropy against 1, and per-class
/// logistic cross-entropy against the smoothed targets. Other slots are
/// ignored when their decoded box overlaps any ground truth by more than 0.5
/// and otherwise get objectness cross-entropy against 0.
pub fn detection_loss_with_grad<T: Real>(
    raw: &Tensor<T>,
    gts: &[GroundTruth],
    head: &HeadLayout<'_>,
    weights: &LossWeights,
    lsr: &LsrConfig,
) -> Result<(LossBreakdown, Tensor<T>, TargetMask), LossError> {
    check_head(raw, head)?;
    if lsr.num_classes != head.num_classes {
        return Err(LossError::LengthMismatch(lsr.num_classes, head.num_classes));
    }
    let k = head.num_classes;
    let s = head.grid.size;
    let assignments = assign_responsible(gts, head)?;
    let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    let mut grad = Tensor::<T>::zeros(raw.channels(), s, s);
    let mut b = LossBreakdown::default();
    let mut mask = Vec::with_capacity(s * s * head.anchors.len());

    for cy in 0..s {
        for cx in 0..s {
            for (a, &prior) in head.anchors.iter().enumerate() {
                let rp = raw_prediction(raw, a, cx, cy, k);
                let ch = |e: usize| head_channel(a, e, k);
                let responsible = assignments.iter().find(|as_| as_.cell == (cx, cy) && as_.anchor == a);
                if let Some(asg) = responsible {
                    mask.push(2);
                    b.positives += 1;
                    let target = encode(asg.grid_box, asg.cell, prior).map_err(|e| LossError::BadGroundTruth {
                        index: asg.gt_index,
                        reason: e.to_string(),
                    })?;
                    let pred = [rp.tx, rp.ty, rp.tw, rp.th];
                    for e in 0..4 {
                        let d = pred[e] - target[e];
                        b.coord_loss += d * d;
                        grad.set(ch(e), cy, cx, T::from_f64(weights.coord * 2.0 * d));
                    }
                    b.obj_loss += bce_with_logit(rp.objectness_logit, 1.0);
                    grad.set(
                        ch(4),
                        cy,
                        cx,
                        T::from_f64(weights.obj * (sigmoid_scalar(rp.objectness_logit) - 1.0)),
                    );
                    let q = lsr_target(lsr, gts[asg.gt_index].class_id)?;
                    for (c, (&logit, &qc)) in rp.class_logits.iter().zip(&q).enumerate() {
                        b.class_loss += bce_with_logit(logit, qc);
                        grad.set(ch(5 + c), cy, cx, T::from_f64(weights.class_w * (sigmoid_scalar(logit) - qc)));
                    }
                } else {
                    let decoded = boxes::decode_one(&rp, (cx, cy), a, prior, head.grid);
                    match non_responsible_target(&decoded.to_bbox(), &gt_boxes, DEFAULT_IGNORE_THRESHOLD) {
                        ObjectnessTarget::Ignore => {
                            mask.push(1);
                            b.ignored += 1;
                        }
                        _ => {
                            mask.push(0);
                            b.negatives += 1;
                            b.noobj_loss += bce_with_logit(rp.objectness_logit, 0.0);
                            grad.set(
                                ch(4),
                                cy,
                                cx,
                                T::from_f64(weights.noobj * sigmoid_scalar(rp.objectness_logit)),
                            );
                        }
                    }
                }
            }
        }
    }
    b.total = b.weighted_total(weights);
    Ok((b, grad, TargetMask(mask)))
}

pub fn detection_loss<T: Real>(
    raw: &Tensor<T>,
    gts: &[GroundTruth],
    head: &HeadLayout<'_>,
    weights: &LossWeights,
    lsr: &LsrConfig,
) -> Result<LossBreakdown, LossError> {
    detection_loss_with_grad(raw, gts, head, weights, lsr).map(|(b, _, _)| b)
}
