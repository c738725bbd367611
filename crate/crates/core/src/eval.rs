//! Detection/classification rates and precision-recall curves.
//!
//! Matching is greedy and class-agnostic: detections are visited in
//! confidence order (input order on ties) and each claims the unmatched
//! ground truth it overlaps most, provided the IoU reaches the threshold.
//! Whether the claimed ground truth has the detection's class is tracked
//! separately, so detection and classification quality are reported on
//! independent axes.

use std::cmp::Ordering;

use crate::boxes::{iou, BBox, DecodedBox};
pub use crate::boxes::GroundTruth;

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("no ground truth in corpus")]
    NoGroundTruth,
}

/// A scored detection in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

impl From<&DecodedBox> for Detection {
    fn from(d: &DecodedBox) -> Self {
        Self {
            class_id: d.class_id,
            bbox: d.to_bbox(),
            confidence: d.confidence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectionVerdict {
    TruePositive { gt_index: usize, class_correct: bool },
    FalsePositive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// One verdict per detection, in input order.
    pub detections: Vec<DetectionVerdict>,
    /// For each ground truth, the detection that claimed it (`None` is a miss).
    pub gt_matched_by: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tp_class_correct: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: &MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tp_class_correct += other.tp_class_correct;
    }
}

impl MatchResult {
    pub fn counts(&self) -> MatchCounts {
        let mut c = MatchCounts::default();
        for v in &self.detections {
            match v {
                DetectionVerdict::TruePositive { class_correct, .. } => {
                    c.tp += 1;
                    c.tp_class_correct += usize::from(*class_correct);
                }
                DetectionVerdict::FalsePositive => c.fp += 1,
            }
        }
        c.fn_ = self.gt_matched_by.iter().filter(|m| m.is_none()).count();
        c
    }
}

/// Detection indices by confidence descending; ties keep input order.
fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(Ordering::Equal)
    });
    order
}

pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> MatchResult {
    let mut verdicts = vec![DetectionVerdict::FalsePositive; dets.len()];
    let mut matched_by: Vec<Option<usize>> = vec![None; gts.len()];
    for d in confidence_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched_by[g].is_some() {
                continue;
            }
            let v = iou(&dets[d].bbox, &gt.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            matched_by[g] = Some(d);
            verdicts[d] = DetectionVerdict::TruePositive {
                gt_index: g,
                class_correct: dets[d].class_id == gts[g].class_id,
            };
        }
    }
    MatchResult {
        detections: verdicts,
        gt_matched_by: matched_by,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    /// `TP / (TP + FN)`.
    pub detection_rate: f64,
    /// `FP / (TP + FP)`, zero without detections.
    pub error_detection_rate: f64,
    /// Class-correct TP over TP, zero without TP.
    pub classification_rate: f64,
    /// Class-incorrect TP over all detections, zero without detections.
    pub error_classification_rate: f64,
}

pub const METRICS_HEADER: &str = "detection_rate,error_detection_rate,classification_rate,error_classification_rate";
pub const PR_HEADER: &str = "threshold,precision,recall";

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(counts: &MatchCounts) -> Result<MetricsReport, EvalError> {
    let gts = counts.tp + counts.fn_;
    if gts == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let dets = counts.tp + counts.fp;
    Ok(MetricsReport {
        detection_rate: ratio(counts.tp, gts),
        error_detection_rate: ratio(counts.fp, dets),
        classification_rate: ratio(counts.tp_class_correct, counts.tp),
        error_classification_rate: ratio(counts.tp - counts.tp_class_correct, dets),
    })
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        format!(
            "{METRICS_HEADER}\n{},{},{},{}\n",
            self.detection_rate, self.error_detection_rate, self.classification_rate, self.error_classification_rate
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall at every distinct confidence, highest first. Each
/// image is `(detections, ground truths)`.
///
/// Greedy matching never lets a lower-confidence detection change the
/// verdict of a higher one, so one matching pass per image serves every
/// threshold.
pub fn pr_curve(images: &[(Vec<Detection>, Vec<GroundTruth>)], iou_threshold: f64) -> Vec<PrPoint> {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut total_gts = 0;
    for (dets, gts) in images {
        total_gts += gts.len();
        let m = match_detections(dets, gts, iou_threshold);
        for (d, v) in dets.iter().zip(&m.detections) {
            scored.push((d.confidence, matches!(v, DetectionVerdict::TruePositive { .. })));
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let threshold = scored[i].0;
        while i < scored.len() && scored[i].0 == threshold {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, total_gts),
        });
    }
    points
}

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut s = format!("{PR_HEADER}\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(class_id: usize, x: f64) -> GroundTruth {
        GroundTruth {
            class_id,
            bbox: BBox::new(x, 0.1, x + 0.1, 0.2),
        }
    }

    fn det(class_id: usize, x: f64, confidence: f64) -> Detection {
        Detection {
            class_id,
            bbox: BBox::new(x, 0.1, x + 0.1, 0.2),
            confidence,
        }
    }

    #[test]
    fn perfect_detector() {
        let gts = vec![gt(0, 0.0), gt(2, 0.5)];
        let dets = vec![det(0, 0.0, 0.9), det(2, 0.5, 0.9)];
        let m = match_detections(&dets, &gts, 0.5);
        let c = m.counts();
        assert_eq!((c.tp, c.fp, c.fn_, c.tp_class_correct), (2, 0, 0, 2));
        let r = metrics(&c).unwrap();
        assert_eq!(
            (r.detection_rate, r.error_detection_rate, r.classification_rate, r.error_classification_rate),
            (1.0, 0.0, 1.0, 0.0)
        );
        let curve = pr_curve(&[(dets, gts)], 0.5);
        assert_eq!(curve, vec![PrPoint { threshold: 0.9, precision: 1.0, recall: 1.0 }]);
    }

    #[test]
    fn silent_detector() {
        let gts = vec![gt(0, 0.0), gt(1, 0.5)];
        let c = match_detections(&[], &gts, 0.5).counts();
        assert_eq!((c.tp, c.fp, c.fn_), (0, 0, 2));
        let r = metrics(&c).unwrap();
        assert_eq!(
            (r.detection_rate, r.error_detection_rate, r.classification_rate, r.error_classification_rate),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!(metrics(&MatchCounts::default()), Err(EvalError::NoGroundTruth));
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let g = gt(0, 0.0);
        // IoU 0.9 and 0.8 with the ground truth via horizontal shifts.
        let s9 = 0.1 / 19.0;
        let s8 = 0.1 * (1.0 - 0.8) / 1.8;
        let dets = vec![det(0, s8, 0.6), det(0, s9, 0.7)];
        assert!((iou(&dets[1].bbox, &g.bbox) - 0.9).abs() < 1e-9);
        assert!((iou(&dets[0].bbox, &g.bbox) - 0.8).abs() < 1e-9);
        let m = match_detections(&dets, &[g], 0.5);
        assert_eq!(m.detections[0], DetectionVerdict::FalsePositive);
        assert_eq!(
            m.detections[1],
            DetectionVerdict::TruePositive {
                gt_index: 0,
                class_correct: true
            }
        );
    }

    #[test]
    fn counts_arithmetic() {
        let c = MatchCounts {
            tp: 8,
            fp: 2,
            fn_: 2,
            tp_class_correct: 7,
        };
        let r = metrics(&c).unwrap();
        assert!((r.detection_rate - 0.8).abs() < 1e-12);
        assert!((r.error_detection_rate - 0.2).abs() < 1e-12);
        assert!((r.classification_rate - 0.875).abs() < 1e-12);
        assert!((r.error_classification_rate - 0.1).abs() < 1e-12);
    }

    #[test]
    fn pr_hand_trace() {
        let gts = vec![gt(0, 0.0), gt(0, 0.5)];
        let dets = vec![det(0, 0.0, 0.9), det(0, 0.8, 0.8), det(0, 0.5, 0.7)];
        let curve = pr_curve(&[(dets, gts)], 0.5);
        assert_eq!(curve.len(), 3);
        assert_eq!((curve[0].threshold, curve[0].precision, curve[0].recall), (0.9, 1.0, 0.5));
        assert_eq!((curve[1].threshold, curve[1].precision, curve[1].recall), (0.8, 0.5, 0.5));
        assert_eq!(curve[2].threshold, 0.7);
        assert!((curve[2].precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(curve[2].recall, 1.0);
    }

    #[test]
    fn all_false_positive_curve() {
        let gts = vec![gt(0, 0.0)];
        let dets = vec![det(0, 0.5, 0.9), det(1, 0.7, 0.4)];
        assert!(pr_curve(&[(dets, gts)], 0.5).iter().all(|p| p.precision == 0.0));
    }
}
