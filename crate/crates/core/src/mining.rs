//! Training-sample categorization by IoU, crop generation, and online hard
//! example mining.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{iou, BBox, GroundTruth};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MiningError {
    #[error("IoU {0} outside [0, 1]")]
    IouOutOfRange(f64),
    #[error("invalid thresholds: need 0 < neg_max ({0}) < part_max ({1}) < 1")]
    BadThresholds(f64, f64),
    #[error("hard ratio {0} outside (0, 1]")]
    BadRatio(f64),
    #[error("no losses to select from")]
    EmptyBatch,
    #[error("loss at index {0} is not finite")]
    NonFiniteLoss(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleThresholds {
    pub neg_max: f64,
    pub part_max: f64,
}

impl Default for SampleThresholds {
    fn default() -> Self {
        Self {
            neg_max: 0.3,
            part_max: 0.65,
        }
    }
}

impl SampleThresholds {
    pub fn new(neg_max: f64, part_max: f64) -> Result<Self, MiningError> {
        if !(0.0 < neg_max && neg_max < part_max && part_max < 1.0) {
            return Err(MiningError::BadThresholds(neg_max, part_max));
        }
        Ok(Self { neg_max, part_max })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SampleCategory {
    Negative,
    PartFace,
    Positive,
}

impl SampleCategory {
    /// Negatives and positives train the classifier.
    pub fn used_for_classification(self) -> bool {
        matches!(self, SampleCategory::Negative | SampleCategory::Positive)
    }

    /// Positives and part samples train box regression.
    pub fn used_for_regression(self) -> bool {
        matches!(self, SampleCategory::Positive | SampleCategory::PartFace)
    }

    pub fn name(self) -> &'static str {
        match self {
            SampleCategory::Negative => "negative",
            SampleCategory::PartFace => "part",
            SampleCategory::Positive => "positive",
        }
    }
}

/// `iou <= neg_max` is negative (zero overlap included), `iou <= part_max`
/// is part, anything above is positive.
pub fn categorize(iou_value: f64, th: &SampleThresholds) -> Result<SampleCategory, MiningError> {
    if !(0.0..=1.0).contains(&iou_value) {
        return Err(MiningError::IouOutOfRange(iou_value));
    }
    Ok(if iou_value <= th.neg_max {
        SampleCategory::Negative
    } else if iou_value <= th.part_max {
        SampleCategory::PartFace
    } else {
        SampleCategory::Positive
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CropQuota {
    pub positive: usize,
    pub negative: usize,
    pub part: usize,
}

impl CropQuota {
    fn get(&self, c: SampleCategory) -> usize {
        match c {
            SampleCategory::Positive => self.positive,
            SampleCategory::Negative => self.negative,
            SampleCategory::PartFace => self.part,
        }
    }

    fn total(&self) -> usize {
        self.positive + self.negative + self.part
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub bbox: BBox,
    pub category: SampleCategory,
    /// Class of the best-overlapping ground truth, if any overlaps.
    pub class_id: Option<usize>,
    pub iou: f64,
}

/// Best IoU against `gts` and the index achieving it (lowest index on ties).
pub fn best_overlap(b: &BBox, gts: &[GroundTruth]) -> (f64, Option<usize>) {
    let mut best = (0.0, None);
    for (i, g) in gts.iter().enumerate() {
        let v = iou(b, &g.bbox);
        if v > best.0 {
            best = (v, Some(i));
        }
    }
    best
}

fn clip_into_unit(b: BBox) -> Option<BBox> {
    let c = b.clamp_unit();
    (c.width() > 0.0 && c.height() > 0.0).then_some(c)
}

/// Samples labeled crops (normalized coordinates) until every quota is met or
/// `100 x` the total quota in attempts is exhausted.
///
/// Candidates near a ground truth are jittered copies of it (center offset up
/// to half its size, scale in `[0.8, 1.25]`); other candidates are uniform
/// random windows. Every crop is labeled by [`categorize`] against its
/// best-overlapping ground truth.
pub fn generate_crops(
    gts: &[GroundTruth],
    quota: CropQuota,
    thresholds: &SampleThresholds,
    seed: u64,
) -> Vec<Crop> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = CropQuota::default();
    let mut crops = Vec::with_capacity(quota.total());
    let max_attempts = 100 * quota.total();
    let mut attempt = 0;
    while attempt < max_attempts && counts.total() < quota.total() {
        attempt += 1;
        let need_near = !gts.is_empty()
            && (counts.positive < quota.positive || counts.part < quota.part);
        let need_far = counts.negative < quota.negative;
        let near = need_near && (!need_far || attempt % 2 == 0);
        let candidate = if near {
            let g = gts[rng.gen_range(0..gts.len())].bbox;
            let (cx, cy) = g.center();
            let (w, h) = (g.width(), g.height());
            let ox = rng.gen_range(-0.5..=0.5) * w;
            let oy = rng.gen_range(-0.5..=0.5) * h;
            let s = rng.gen_range(0.8..=1.25);
            BBox::from_center(cx + ox, cy + oy, w * s, h * s)
        } else {
            let w: f64 = rng.gen_range(0.1..=0.5);
            let h: f64 = rng.gen_range(0.1..=0.5);
            let x = rng.gen_range(0.0..=1.0 - w);
            let y = rng.gen_range(0.0..=1.0 - h);
            BBox::new(x, y, x + w, y + h)
        };
        let Some(bbox) = clip_into_unit(candidate) else {
            continue;
        };
        let (v, idx) = best_overlap(&bbox, gts);
        let category = categorize(v, thresholds).expect("IoU is always within [0, 1]");
        let have = match category {
            SampleCategory::Positive => &mut counts.positive,
            SampleCategory::Negative => &mut counts.negative,
            SampleCategory::PartFace => &mut counts.part,
        };
        if *have >= quota.get(category) {
            continue;
        }
        *have += 1;
        crops.push(Crop {
            bbox,
            category,
            class_id: idx.map(|i| gts[i].class_id),
            iou: v,
        });
    }
    crops
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningConfig {
    pub hard_ratio: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { hard_ratio: 0.7 }
    }
}

impl MiningConfig {
    pub fn new(hard_ratio: f64) -> Result<Self, MiningError> {
        if !(hard_ratio > 0.0 && hard_ratio <= 1.0) {
            return Err(MiningError::BadRatio(hard_ratio));
        }
        Ok(Self { hard_ratio })
    }

    /// `max(1, floor(hard_ratio * n))`.
    pub fn keep_count(&self, n: usize) -> usize {
        ((self.hard_ratio * n as f64).floor() as usize).clamp(1, n.max(1))
    }
}

/// Indices of the hardest samples: the `keep_count(n)` largest losses, sorted
/// by loss descending with ties going to the lower index.
pub fn ohem_select(losses: &[f64], cfg: &MiningConfig) -> Result<Vec<usize>, MiningError> {
    if losses.is_empty() {
        return Err(MiningError::EmptyBatch);
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(MiningError::NonFiniteLoss(i));
    }
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    idx.truncate(cfg.keep_count(losses.len()));
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries() {
        let th = SampleThresholds::default();
        let cat = |v| categorize(v, &th).unwrap();
        assert_eq!(cat(0.30), SampleCategory::Negative);
        assert_eq!(cat(0.65), SampleCategory::PartFace);
        assert_eq!(cat(0.66), SampleCategory::Positive);
        assert_eq!(cat(0.0), SampleCategory::Negative);
        assert!(categorize(1.01, &th).is_err());
        assert!(categorize(f64::NAN, &th).is_err());
        assert!(SampleThresholds::new(0.7, 0.65).is_err());
    }

    #[test]
    fn ohem_examples() {
        let cfg = MiningConfig::default();
        let losses = [0.9, 0.1, 0.5, 0.7, 0.3, 0.2, 0.8, 0.4, 0.6, 1.0];
        assert_eq!(ohem_select(&losses, &cfg).unwrap(), vec![9, 0, 6, 3, 8, 2, 7]);
        assert_eq!(ohem_select(&[3.0], &cfg).unwrap(), vec![0]);
        assert_eq!(ohem_select(&[1.0; 10], &cfg).unwrap(), (0..7).collect::<Vec<_>>());
        assert_eq!(ohem_select(&[], &cfg), Err(MiningError::EmptyBatch));
        assert_eq!(ohem_select(&[1.0, f64::NAN], &cfg), Err(MiningError::NonFiniteLoss(1)));
        assert!(MiningConfig::new(0.0).is_err());
    }

    #[test]
    fn crop_flags() {
        assert!(SampleCategory::Positive.used_for_classification());
        assert!(SampleCategory::Positive.used_for_regression());
        assert!(!SampleCategory::PartFace.used_for_classification());
        assert!(!SampleCategory::Negative.used_for_regression());
    }

    fn car() -> GroundTruth {
        GroundTruth {
            class_id: 0,
            bbox: BBox::new(0.3, 0.3, 0.6, 0.6),
        }
    }

    #[test]
    fn crops_meet_table_ratio_quotas() {
        let quota = CropQuota {
            positive: 50,
            negative: 18,
            part: 55,
        };
        let crops = generate_crops(&[car()], quota, &SampleThresholds::default(), 4);
        let n = |c| crops.iter().filter(|x| x.category == c).count();
        assert_eq!(n(SampleCategory::Positive), 50);
        assert_eq!(n(SampleCategory::Negative), 18);
        assert_eq!(n(SampleCategory::PartFace), 55);
        assert_eq!(crops, generate_crops(&[car()], quota, &SampleThresholds::default(), 4));
    }

    #[test]
    fn no_ground_truth_only_negatives() {
        let quota = CropQuota {
            positive: 5,
            negative: 5,
            part: 5,
        };
        let crops = generate_crops(&[], quota, &SampleThresholds::default(), 1);
        assert_eq!(crops.len(), 5);
        assert!(crops.iter().all(|c| c.category == SampleCategory::Negative && c.class_id.is_none()));
    }

    #[test]
    fn identical_and_disjoint_crops() {
        let th = SampleThresholds::default();
        let (v, idx) = best_overlap(&car().bbox, &[car()]);
        assert_eq!((categorize(v, &th).unwrap(), idx), (SampleCategory::Positive, Some(0)));
        let (v, idx) = best_overlap(&BBox::new(0.8, 0.8, 0.9, 0.9), &[car()]);
        assert_eq!((categorize(v, &th).unwrap(), idx), (SampleCategory::Negative, None));
    }
}
