//! Box geometry: decoding the raw head into boxes, encoding training targets,
//! IoU, greedy per-class NMS and the objectness target rule.
//!
//! Grid-unit boxes use the head's cell grid: a box centered in cell
//! `(c_x, c_y)` has `c_x < b_x < c_x + 1`. Normalized boxes divide by the grid size.

use std::cmp::Ordering;

use crate::tensor::{sigmoid_scalar, Real, ShapeError, Tensor};

/// Cell offsets are kept this far inside the open unit interval, both when
/// decoding and before taking the logit in [`encode`].
pub const CELL_EPS: f64 = 1e-6;
/// Probabilities reported by [`decode`] stay within `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-12;
/// `t_w`, `t_h` are clamped to this magnitude before exponentiation.
pub const MAX_LOG_SCALE: f64 = 40.0;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.45;
pub const DEFAULT_IGNORE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    /// Cells per side.
    pub size: usize,
}

impl GridSpec {
    pub fn new(size: usize) -> Self {
        assert!(size >= 1, "grid must have at least one cell");
        Self { size }
    }

    /// Cell containing a grid-unit point, clamped to the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let last = (self.size - 1) as f64;
        (x.floor().clamp(0.0, last) as usize, y.floor().clamp(0.0, last) as usize)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BoxError {
    #[error("box center {value} outside cell [{cell}, {}]", cell + 1)]
    CenterOutsideCell { value: f64, cell: usize },
    #[error("box size must be positive, got {w} x {h}")]
    NonPositiveSize { w: f64, h: f64 },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Axis-aligned box `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    pub fn clamp_unit(&self) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        Self::new(c(self.x1), c(self.y1), c(self.x2), c(self.y2))
    }
}

/// An annotated object: class id (0 car, 1 person, 2 driver) and a normalized box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Intersection over union; zero for disjoint or zero-area boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (area_a + area_b - inter)).clamp(0.0, 1.0)
}

/// IoU of two `(w, h)` shapes sharing a center.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    iou(&BBox::from_center(0.0, 0.0, a.0, a.1), &BBox::from_center(0.0, 0.0, b.0, b.1))
}

/// Raw head values for one anchor at one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBoxPrediction {
    pub tx: f64,
    pub ty: f64,
    /// `m` in `b_w = p_w e^m`.
    pub tw: f64,
    /// `n` in `b_h = p_h e^n`.
    pub th: f64,
    pub objectness_logit: f64,
    pub class_logits: Vec<f64>,
}

/// Channel of entry `entry` for `anchor` in the raw head.
/// Per anchor: `t_x, t_y, t_w, t_h, objectness, class_0 .. class_{K-1}`.
#[inline]
pub fn head_channel(anchor: usize, entry: usize, num_classes: usize) -> usize {
    anchor * (5 + num_classes) + entry
}

pub fn raw_prediction<T: Real>(
    raw: &Tensor<T>,
    anchor: usize,
    cx: usize,
    cy: usize,
    num_classes: usize,
) -> RawBoxPrediction {
    let v = |e: usize| raw.get(head_channel(anchor, e, num_classes), cy, cx).to_f64();
    RawBoxPrediction {
        tx: v(0),
        ty: v(1),
        tw: v(2),
        th: v(3),
        objectness_logit: v(4),
        class_logits: (0..num_classes).map(|k| v(5 + k)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedBox {
    /// Center and size in grid units.
    pub bx: f64,
    pub by: f64,
    pub bw: f64,
    pub bh: f64,
    pub objectness: f64,
    /// Independent logistic outputs; they need not sum to one.
    pub class_probs: Vec<f64>,
    pub class_id: usize,
    /// `objectness * max(class_probs)`.
    pub confidence: f64,
    pub cell: (usize, usize),
    pub anchor: usize,
    pub grid_size: usize,
}

impl DecodedBox {
    /// Normalized image-space box, clipped to the unit square.
    pub fn to_bbox(&self) -> BBox {
        BBox::from_center(self.bx, self.by, self.bw, self.bh)
            .scale(1.0 / self.grid_size as f64)
            .clamp_unit()
    }

    /// Row-major cell index, used for deterministic tie-breaking.
    pub fn cell_index(&self) -> usize {
        self.cell.1 * self.grid_size + self.cell.0
    }
}

/// Confidence descending, then lower cell index, then lower anchor index.
pub fn rank_order(a: &DecodedBox, b: &DecodedBox) -> Ordering {
    b.confidence
        .partial_cmp(&a.confidence)
        .unwrap_or(Ordering::Equal)
        .then(a.cell_index().cmp(&b.cell_index()))
        .then(a.anchor.cmp(&b.anchor))
}

#[inline]
fn bounded_logistic(x: f64, eps: f64) -> f64 {
    sigmoid_scalar(x).clamp(eps, 1.0 - eps)
}

/// Decodes one raw prediction at cell `(cx, cy)` with anchor prior `(pw, ph)`.
pub fn decode_one(
    raw: &RawBoxPrediction,
    cell: (usize, usize),
    anchor_index: usize,
    anchor: (f64, f64),
    grid: GridSpec,
) -> DecodedBox {
    let bx = bounded_logistic(raw.tx, CELL_EPS) + cell.0 as f64;
    let by = bounded_logistic(raw.ty, CELL_EPS) + cell.1 as f64;
    let bw = anchor.0 * raw.tw.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let bh = anchor.1 * raw.th.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let objectness = bounded_logistic(raw.objectness_logit, PROB_EPS);
    let class_probs: Vec<f64> = raw
        .class_logits
        .iter()
        .map(|&l| bounded_logistic(l, PROB_EPS))
        .collect();
    let (class_id, best) = class_probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc });
    DecodedBox {
        bx,
        by,
        bw,
        bh,
        objectness,
        confidence: objectness * best,
        class_probs,
        class_id,
        cell,
        anchor: anchor_index,
        grid_size: grid.size,
    }
}

/// Decodes every `(cell, anchor)` of a raw head, cell-major then anchor order.
pub fn decode<T: Real>(raw: &Tensor<T>, anchors: &[(f64, f64)], grid: GridSpec) -> Result<Vec<DecodedBox>, BoxError> {
    let (c, h, w) = raw.shape();
    if anchors.is_empty() || c % anchors.len() != 0 || c / anchors.len() < 6 {
        return Err(ShapeError::new(
            "decode",
            format!("{c} channels is not anchors({}) x (5 + K)", anchors.len()),
        )
        .into());
    }
    if h != grid.size || w != grid.size {
        return Err(ShapeError::new("decode", format!("map {h}x{w} does not match grid {}", grid.size)).into());
    }
    let k = c / anchors.len() - 5;
    let mut out = Vec::with_capacity(anchors.len() * h * w);
    for cy in 0..h {
        for cx in 0..w {
            for (a, &anchor) in anchors.iter().enumerate() {
                let rp = raw_prediction(raw, a, cx, cy, k);
                out.push(decode_one(&rp, (cx, cy), a, anchor, grid));
            }
        }
    }
    Ok(out)
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse of the decode transform for a grid-unit box `(cx, cy, w, h)`:
/// returns `(t_x, t_y, t_w, t_h)`.
pub fn encode(gt: (f64, f64, f64, f64), cell: (usize, usize), anchor: (f64, f64)) -> Result<[f64; 4], BoxError> {
    let (bx, by, bw, bh) = gt;
    if !(bw > 0.0 && bh > 0.0) {
        return Err(BoxError::NonPositiveSize { w: bw, h: bh });
    }
    let offset = |v: f64, c: usize| -> Result<f64, BoxError> {
        let o = v - c as f64;
        if !(0.0..=1.0).contains(&o) {
            return Err(BoxError::CenterOutsideCell { value: v, cell: c });
        }
        Ok(o.clamp(CELL_EPS, 1.0 - CELL_EPS))
    };
    let ox = offset(bx, cell.0)?;
    let oy = offset(by, cell.1)?;
    Ok([logit(ox), logit(oy), (bw / anchor.0).ln(), (bh / anchor.1).ln()])
}

/// Greedy class-wise non-maximum suppression. Within each class the highest
/// ranked remaining box is kept and every box overlapping it by more than
/// `iou_threshold` is dropped. Survivors are returned in rank order.
pub fn nms(dets: &[DecodedBox], iou_threshold: f64) -> Vec<DecodedBox> {
    let mut order: Vec<&DecodedBox> = dets.iter().collect();
    order.sort_by(|a, b| rank_order(a, b));
    let boxes: Vec<BBox> = order.iter().map(|d| d.to_bbox()).collect();
    let mut suppressed = vec![false; order.len()];
    let mut kept = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        kept.push(order[i].clone());
        for j in i + 1..order.len() {
            if !suppressed[j] && order[j].class_id == order[i].class_id && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectnessTarget {
    /// Best-overlapping prediction for ground truth `gt_index`; target 1.
    Positive(usize),
    /// Overlaps some ground truth by more than the threshold; contributes no loss.
    Ignore,
    /// Target 0.
    Negative,
}

/// Objectness targets for a set of predictions: for each ground truth the
/// prediction overlapping it best is positive; any other prediction whose
/// best IoU exceeds `ignore_threshold` is ignored; the rest are negative.
pub fn objectness_targets(preds: &[BBox], gts: &[BBox], ignore_threshold: f64) -> Vec<ObjectnessTarget> {
    let mut out = vec![ObjectnessTarget::Negative; preds.len()];
    for (i, p) in preds.iter().enumerate() {
        if gts.iter().any(|g| iou(p, g) > ignore_threshold) {
            out[i] = ObjectnessTarget::Ignore;
        }
    }
    for (g_idx, g) in gts.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in preds.iter().enumerate() {
            let v = iou(p, g);
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            if !matches!(out[i], ObjectnessTarget::Positive(_)) {
                out[i] = ObjectnessTarget::Positive(g_idx);
            }
        }
    }
    out
}

/// Ignore-or-negative part of [`objectness_targets`] for a single prediction
/// that is not responsible for any ground truth.
pub fn non_responsible_target(pred: &BBox, gts: &[BBox], ignore_threshold: f64) -> ObjectnessTarget {
    if gts.iter().any(|g| iou(pred, g) > ignore_threshold) {
        ObjectnessTarget::Ignore
    } else {
        ObjectnessTarget::Negative
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(tx: f64, ty: f64, tw: f64, th: f64) -> RawBoxPrediction {
        RawBoxPrediction {
            tx,
            ty,
            tw,
            th,
            objectness_logit: 0.0,
            class_logits: vec![0.0; 3],
        }
    }

    #[test]
    fn decode_worked_example() {
        let d = decode_one(&raw(0.0, 0.0, 0.0, 0.0), (5, 7), 0, (2.0, 3.0), GridSpec::new(13));
        assert_eq!((d.bx, d.by, d.bw, d.bh), (5.5, 7.5, 2.0, 3.0));
    }

    #[test]
    fn saturated_offset_stays_inside_cell() {
        let d = decode_one(&raw(20.0, -20.0, 0.0, 0.0), (5, 7), 0, (2.0, 3.0), GridSpec::new(13));
        assert!(d.bx < 6.0 && d.bx > 5.999);
        assert!(d.by > 7.0 && d.by < 7.001);
    }

    #[test]
    fn full_head_box_count() {
        let t = Tensor::<f32>::zeros(40, 13, 13);
        let anchors = crate::network::DEFAULT_ANCHORS.to_vec();
        assert_eq!(decode(&t, &anchors, GridSpec::new(13)).unwrap().len(), 845);
        assert!(decode(&Tensor::<f32>::zeros(39, 13, 13), &anchors, GridSpec::new(13)).is_err());
    }

    #[test]
    fn encode_inverts_worked_example() {
        let t = encode((5.5, 7.5, 2.0, 3.0), (5, 7), (2.0, 3.0)).unwrap();
        assert_eq!(t, [0.0, 0.0, 0.0, 0.0]);
        let t = encode((5.5, 7.5, 1.0, 3.0), (5, 7), (2.0, 3.0)).unwrap();
        assert!((t[2] - 0.5f64.ln()).abs() < 1e-12);
        assert!((t[2] + std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn encode_domain_errors() {
        assert!(matches!(
            encode((6.5, 7.5, 1.0, 1.0), (5, 7), (1.0, 1.0)),
            Err(BoxError::CenterOutsideCell { .. })
        ));
        assert!(matches!(
            encode((5.5, 7.5, 0.0, 1.0), (5, 7), (1.0, 1.0)),
            Err(BoxError::NonPositiveSize { .. })
        ));
        // Boundary centers are clamped, not rejected.
        let t = encode((5.0, 8.0, 1.0, 1.0), (5, 7), (1.0, 1.0)).unwrap();
        assert!(t.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn iou_values() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(3.0, 3.0, 4.0, 4.0)), 0.0);
        let v = iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
        let degenerate = BBox::new(1.0, 1.0, 1.0, 2.0);
        assert_eq!(iou(&degenerate, &degenerate), 0.0);
    }

    fn det(x: f64, conf: f64, class_id: usize, cell: usize) -> DecodedBox {
        DecodedBox {
            bx: x,
            by: 1.0,
            bw: 1.0,
            bh: 1.0,
            objectness: conf,
            class_probs: vec![1.0; 3],
            class_id,
            confidence: conf,
            cell: (cell, 0),
            anchor: 0,
            grid_size: 13,
        }
    }

    #[test]
    fn nms_single_and_pair() {
        let one = vec![det(1.0, 0.7, 0, 0)];
        assert_eq!(nms(&one, 0.45), one);
        // Shift of 1/19 of the width gives IoU 0.9.
        let shift = 1.0 / 19.0;
        let pair = vec![det(1.0 + shift, 0.8, 0, 1), det(1.0, 0.9, 0, 0)];
        let kept = nms(&pair, 0.45);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
        // Different classes never suppress each other.
        let mixed = vec![det(1.0, 0.9, 0, 0), det(1.0, 0.8, 1, 1)];
        assert_eq!(nms(&mixed, 0.45).len(), 2);
    }

    #[test]
    fn objectness_rule() {
        let gt = BBox::new(0.0, 0.0, 1.0, 1.0);
        let preds = vec![
            gt,
            BBox::new(0.0, 0.0, 1.0, 0.6),
            BBox::new(5.0, 5.0, 6.0, 6.0),
        ];
        let t = objectness_targets(&preds, &[gt], 0.5);
        assert_eq!(
            t,
            vec![ObjectnessTarget::Positive(0), ObjectnessTarget::Ignore, ObjectnessTarget::Negative]
        );
    }
}
