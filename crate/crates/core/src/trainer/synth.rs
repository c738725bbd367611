//! Synthetic training images: filled rectangles in per-class colors over a
//! faint noise background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::boxes::{BBox, GroundTruth};
use crate::network::{DEFAULT_NUM_CLASSES, TINY_GRID};
use crate::tensor::Tensor;

/// Side length in pixels of every synthetic image.
pub const SYNTH_SIZE: usize = 64;
/// Background pixels are uniform in `[0, SYNTH_NOISE]`.
pub const SYNTH_NOISE: f32 = 0.05;

const COLORS: [[f32; 3]; DEFAULT_NUM_CLASSES] = [[0.9, 0.15, 0.1], [0.1, 0.85, 0.2], [0.15, 0.25, 0.95]];
const MIN_SIDE: usize = 10;
const MAX_SIDE: usize = 26;

fn overlaps(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    // One pixel of clearance between rectangles.
    a.0 <= b.2 && b.0 <= a.2 && a.1 <= b.3 && b.1 <= a.3
}

/// `n_images` samples, each with 1 to 3 non-overlapping rectangles whose
/// centers fall in distinct cells of the tiny detection grid. Classes are
/// uniform; the same seed gives the same dataset.
pub fn synth_dataset(seed: u64, n_images: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = SYNTH_SIZE / TINY_GRID;
    (0..n_images)
        .map(|_| {
            let mut image = Tensor::<f32>::zeros(3, SYNTH_SIZE, SYNTH_SIZE);
            for v in image.data_mut() {
                *v = rng.gen_range(0.0..=SYNTH_NOISE);
            }
            let want = rng.gen_range(1..=3);
            let mut rects: Vec<(usize, usize, usize, usize)> = Vec::new();
            let mut cells: Vec<(usize, usize)> = Vec::new();
            let mut gts = Vec::new();
            let mut attempts = 0;
            while gts.len() < want && (gts.is_empty() || attempts < 200) {
                attempts += 1;
                let w = rng.gen_range(MIN_SIDE..=MAX_SIDE);
                let h = rng.gen_range(MIN_SIDE..=MAX_SIDE);
                let x0 = rng.gen_range(0..=SYNTH_SIZE - w);
                let y0 = rng.gen_range(0..=SYNTH_SIZE - h);
                let r = (x0, y0, x0 + w, y0 + h);
                let c = ((2 * x0 + w) / (2 * cell), (2 * y0 + h) / (2 * cell));
                if cells.contains(&c) || rects.iter().any(|&o| overlaps(o, r)) {
                    continue;
                }
                let class_id = rng.gen_range(0..DEFAULT_NUM_CLASSES);
                for ch in 0..3 {
                    for y in y0..y0 + h {
                        for x in x0..x0 + w {
                            image.set(ch, y, x, COLORS[class_id][ch]);
                        }
                    }
                }
                let s = SYNTH_SIZE as f64;
                gts.push(GroundTruth {
                    class_id,
                    bbox: BBox::new(x0 as f64 / s, y0 as f64 / s, (x0 + w) as f64 / s, (y0 + h) as f64 / s),
                });
                rects.push(r);
                cells.push(c);
            }
            Sample { image, gts }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::GridSpec;

    #[test]
    fn deterministic() {
        assert_eq!(synth_dataset(5, 4), synth_dataset(5, 4));
        assert_ne!(synth_dataset(5, 4), synth_dataset(6, 4));
    }

    #[test]
    fn generator_contract() {
        let grid = GridSpec::new(TINY_GRID);
        for s in synth_dataset(1, 100) {
            assert!((1..=3).contains(&s.gts.len()));
            assert_eq!(s.image.shape(), (3, SYNTH_SIZE, SYNTH_SIZE));
            let mut cells = Vec::new();
            for g in &s.gts {
                let b = g.bbox;
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 1.0 && b.y2 <= 1.0);
                assert!(b.area() >= 0.01);
                let (cx, cy) = b.center();
                let c = grid.cell_of(cx * TINY_GRID as f64, cy * TINY_GRID as f64);
                assert!(!cells.contains(&c));
                cells.push(c);
            }
        }
    }

    #[test]
    fn classes_roughly_uniform() {
        let mut hist = [0usize; DEFAULT_NUM_CLASSES];
        for s in synth_dataset(9, 300) {
            for g in s.gts {
                hist[g.class_id] += 1;
            }
        }
        let n: usize = hist.iter().sum();
        for h in hist {
            let f = h as f64 / n as f64;
            assert!((0.25..=0.42).contains(&f), "{f}");
        }
    }
}
