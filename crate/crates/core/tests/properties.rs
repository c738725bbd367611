use iyolo::boxes::{decode_one, encode, iou, nms, BBox, DecodedBox, GridSpec, RawBoxPrediction};
use iyolo::eval::{match_detections, pr_curve, Detection, DetectionVerdict, GroundTruth};
use iyolo::io::{decode_ppm, encode_ppm, format_annotations, parse_annotations, Annotation};
use iyolo::loss::{cross_entropy, lsr_loss, lsr_target, LsrConfig};
use iyolo::mining::{categorize, ohem_select, MiningConfig, SampleCategory, SampleThresholds};
use proptest::prelude::*;

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-3..1.0f64, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn unit_box() -> impl Strategy<Value = BBox> {
    (0.0..0.9f64, 0.0..0.9f64, 0.02..0.5f64, 0.02..0.5f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)))
}

fn detection() -> impl Strategy<Value = Detection> {
    (0..3usize, unit_box(), 0.0..1.0f64).prop_map(|(class_id, bbox, confidence)| Detection {
        class_id,
        bbox,
        confidence,
    })
}

fn ground_truth() -> impl Strategy<Value = GroundTruth> {
    (0..3usize, unit_box()).prop_map(|(class_id, bbox)| GroundTruth { class_id, bbox })
}

proptest! {
    #[test]
    fn lsr_loss_is_cross_entropy_against_smoothed_target(
        (k, p, y) in (2..=10usize).prop_flat_map(|k| (Just(k), distribution(k), 0..k)),
        eps in 0.0..=1.0f64,
    ) {
        let cfg = LsrConfig::new(eps, k).unwrap();
        let q = lsr_target(&cfg, y).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let closed = lsr_loss(&p, y, &cfg).unwrap();
        prop_assert!((closed - cross_entropy(&p, &q).unwrap()).abs() <= 1e-12);
        // Smoothing never rewards confidence beyond the one-hot loss at the label.
        prop_assert!(closed >= 0.0);
    }

    #[test]
    fn decode_inverts_encode(
        cell in (0..13usize, 0..13usize),
        off in (0.001..0.999f64, 0.001..0.999f64),
        size in (0.05..13.0f64, 0.05..13.0f64),
        anchor in (0.5..12.0f64, 0.5..12.0f64),
    ) {
        let gt = (cell.0 as f64 + off.0, cell.1 as f64 + off.1, size.0, size.1);
        let t = encode(gt, cell, anchor).unwrap();
        let raw = RawBoxPrediction { tx: t[0], ty: t[1], tw: t[2], th: t[3], objectness_logit: 0.0, class_logits: vec![0.0; 3] };
        let d = decode_one(&raw, cell, 0, anchor, GridSpec::new(13));
        for (a, b) in [(d.bx, gt.0), (d.by, gt.1), (d.bw, gt.2), (d.bh, gt.3)] {
            prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn categorize_partitions_unit_interval(v in 0.0..=1.0f64) {
        let th = SampleThresholds::default();
        let c = categorize(v, &th).unwrap();
        let expected = if v <= 0.3 { SampleCategory::Negative } else if v <= 0.65 { SampleCategory::PartFace } else { SampleCategory::Positive };
        prop_assert_eq!(c, expected);
    }

    #[test]
    fn ohem_matches_sort_oracle(losses in prop::collection::vec((0..20u32).prop_map(|v| v as f64 / 4.0), 1..40)) {
        let cfg = MiningConfig::default();
        let mut pairs: Vec<(f64, usize)> = losses.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let keep = ((0.7 * losses.len() as f64).floor() as usize).max(1);
        let oracle: Vec<usize> = pairs[..keep].iter().map(|p| p.1).collect();
        prop_assert_eq!(ohem_select(&losses, &cfg).unwrap(), oracle);
    }

    #[test]
    fn nms_survivors_are_pairwise_separated(
        raw in prop::collection::vec((0..3usize, 0.0..1.0f64, 0.0..1.0f64, 0.5..3.0f64, 0.5..3.0f64, 0.0..1.0f64), 1..60),
        threshold in 0.1..0.9f64,
    ) {
        let dets: Vec<DecodedBox> = raw.iter().enumerate().map(|(i, &(class_id, ox, oy, w, h, conf))| {
            let cell = (i % 13, i / 13);
            DecodedBox {
                bx: cell.0 as f64 + ox, by: cell.1 as f64 + oy, bw: w, bh: h,
                objectness: conf, class_probs: vec![1.0; 3], class_id, confidence: conf,
                cell, anchor: 0, grid_size: 13,
            }
        }).collect();
        let kept = nms(&dets, threshold);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.confidence >= b.confidence);
                if a.class_id == b.class_id {
                    prop_assert!(iou(&a.to_bbox(), &b.to_bbox()) <= threshold);
                }
            }
        }
        // Every dropped box is covered by a kept box of its class that outranks it.
        for d in &dets {
            if !kept.contains(d) {
                prop_assert!(kept.iter().any(|k| k.class_id == d.class_id
                    && k.confidence >= d.confidence
                    && iou(&k.to_bbox(), &d.to_bbox()) > threshold));
            }
        }
    }

    #[test]
    fn matching_invariants(
        dets in prop::collection::vec(detection(), 0..12),
        gts in prop::collection::vec(ground_truth(), 0..8),
        t in 0.3..0.9f64,
    ) {
        let m = match_detections(&dets, &gts, t);
        let mut claimed = vec![false; gts.len()];
        for v in &m.detections {
            if let DetectionVerdict::TruePositive { gt_index, .. } = v {
                prop_assert!(!claimed[*gt_index]);
                claimed[*gt_index] = true;
            }
        }
        let c = m.counts();
        prop_assert_eq!(c.tp + c.fp, dets.len());
        prop_assert_eq!(c.tp + c.fn_, gts.len());
        let stricter = match_detections(&dets, &gts, (t + 0.1).min(1.0)).counts();
        prop_assert!(stricter.tp <= c.tp);
        let mut reversed = dets.clone();
        reversed.reverse();
        let r = match_detections(&reversed, &gts, t).counts();
        prop_assert_eq!((r.tp, r.fp), (c.tp, c.fp));
    }

    #[test]
    fn pr_recall_monotone(
        images in prop::collection::vec((prop::collection::vec(detection(), 0..6), prop::collection::vec(ground_truth(), 1..4)), 1..5),
    ) {
        let curve = pr_curve(&images, 0.5);
        for w in curve.windows(2) {
            prop_assert!(w[0].threshold > w[1].threshold);
            prop_assert!(w[0].recall <= w[1].recall);
        }
        for p in &curve {
            prop_assert!((0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall));
        }
    }

    #[test]
    fn annotations_round_trip(items in prop::collection::vec(
        (0..3usize, 0.05..0.95f64, 0.05..0.95f64, 0.01..1.0f64, 0.01..1.0f64, prop::option::of(0.0..=1.0f64)), 0..10)
    ) {
        let anns: Vec<Annotation> = items.into_iter()
            .map(|(class_id, cx, cy, w, h, confidence)| Annotation { class_id, cx, cy, w, h, confidence })
            .collect();
        prop_assert_eq!(parse_annotations(&format_annotations(&anns)).unwrap(), anns);
    }

    #[test]
    fn ppm_bytes_are_a_fixed_point(
        (h, w, pixels) in (1..12usize, 1..12usize).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(any::<u8>(), 3 * h * w))),
    ) {
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend_from_slice(&pixels);
        let img = decode_ppm(&bytes).unwrap();
        prop_assert_eq!(encode_ppm(&img).unwrap(), bytes);
    }
}
