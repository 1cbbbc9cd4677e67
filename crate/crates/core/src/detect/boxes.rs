//! Axis-aligned boxes and the standard proposal arithmetic: IoU, delta
//! encoding, greedy NMS and grid anchors.

use serde::{Deserialize, Serialize};

/// Keeps `exp` in the delta decode from producing unbounded boxes.
const DELTA_WH_CLAMP: f64 = 4.0;

/// Axis-aligned rectangle in pixel coordinates, origin top-left, `x1 < x2`,
/// `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxF {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    /// Clip into `[0, w] x [0, h]`.
    pub fn clip(&self, w: f64, h: f64) -> BoxF {
        BoxF {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }
}

/// Intersection-over-union of two boxes; 0 when disjoint.
pub fn iou(a: &BoxF, b: &BoxF) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Encode `target` relative to `anchor` as center offsets normalized by the
/// anchor size plus log width/height ratios.
pub fn encode_deltas(anchor: &BoxF, target: &BoxF) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_deltas`].
pub fn decode_deltas(anchor: &BoxF, d: &[f64; 4]) -> BoxF {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + d[0] * aw;
    let cy = acy + d[1] * ah;
    let w = aw * d[2].min(DELTA_WH_CLAMP).exp();
    let h = ah * d[3].min(DELTA_WH_CLAMP).exp();
    BoxF::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Greedy highest-score-first NMS; ties broken by lower index. Returns kept
/// indices in score order.
pub fn nms(boxes: &[BoxF], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&j| iou(&boxes[i], &boxes[j]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Anchors centered on feature-grid cell centers, ordered row-major over
/// cells then by size.
pub fn generate_anchors(feat_h: usize, feat_w: usize, stride: usize, sizes: &[f64]) -> Vec<BoxF> {
    let mut anchors = Vec::with_capacity(feat_h * feat_w * sizes.len());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let cx = (x * stride) as f64 + stride as f64 / 2.0;
            let cy = (y * stride) as f64 + stride as f64 / 2.0;
            for &s in sizes {
                anchors.push(BoxF::new(
                    cx - s / 2.0,
                    cy - s / 2.0,
                    cx + s / 2.0,
                    cy + s / 2.0,
                ));
            }
        }
    }
    anchors
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_identity_and_disjoint() {
        let a = BoxF::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BoxF::new(5.0, 5.0, 7.0, 7.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_hand_computed_third() {
        // inter = 2, union = 6
        let a = BoxF::new(0.0, 0.0, 2.0, 2.0);
        let b = BoxF::new(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn encode_identity_is_zero() {
        let a = BoxF::new(3.0, 4.0, 13.0, 24.0);
        let d = encode_deltas(&a, &a);
        assert!(d.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn double_width_encodes_ln2() {
        let a = BoxF::new(0.0, 0.0, 10.0, 10.0);
        let t = BoxF::new(0.0, 0.0, 20.0, 10.0);
        let d = encode_deltas(&a, &t);
        assert!((d[2] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn anchor_count_and_geometry() {
        let anchors = generate_anchors(16, 16, 8, &[16.0, 32.0, 64.0]);
        assert_eq!(anchors.len(), 768);
        // cell (0,0), size 16: centered at (4,4), width 16
        let a = anchors[0];
        assert_eq!(a.center(), (4.0, 4.0));
        assert_eq!(a.width(), 16.0);
    }

    #[test]
    fn anchors_are_translation_covariant() {
        let anchors = generate_anchors(4, 4, 8, &[16.0, 32.0, 64.0]);
        // cell (i, j+1) equals cell (i, j) shifted by stride in x
        for y in 0..4 {
            for x in 0..3 {
                for s in 0..3 {
                    let a = anchors[(y * 4 + x) * 3 + s];
                    let b = anchors[(y * 4 + x + 1) * 3 + s];
                    assert_eq!(b.x1, a.x1 + 8.0);
                    assert_eq!(b.y1, a.y1);
                }
            }
        }
    }

    #[test]
    fn nms_suppresses_duplicates() {
        let boxes = vec![BoxF::new(0.0, 0.0, 2.0, 2.0), BoxF::new(0.0, 0.0, 2.0, 2.0)];
        let kept = nms(&boxes, &[0.9, 0.8], 0.7);
        assert_eq!(kept, vec![0]);
        assert_eq!(nms(&boxes[..1], &[0.5], 0.7), vec![0]);
    }

    /// O(n^2) reference: a box is kept iff no higher-ranked kept box overlaps
    /// it above the threshold.
    fn nms_bruteforce(boxes: &[BoxF], scores: &[f64], thresh: f64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut kept: Vec<usize> = Vec::new();
        'outer: for &i in &order {
            for &j in &kept {
                if iou(&boxes[i], &boxes[j]) > thresh {
                    continue 'outer;
                }
            }
            kept.push(i);
        }
        kept
    }

    #[test]
    fn nms_matches_bruteforce_on_random_instances() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(77);
        for _ in 0..100 {
            let n = rng.gen_range(1..50);
            let boxes: Vec<BoxF> = (0..n)
                .map(|_| {
                    let x1 = rng.gen_range(0.0..100.0);
                    let y1 = rng.gen_range(0.0..100.0);
                    BoxF::new(
                        x1,
                        y1,
                        x1 + rng.gen_range(1.0..40.0),
                        y1 + rng.gen_range(1.0..40.0),
                    )
                })
                .collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            assert_eq!(
                nms(&boxes, &scores, 0.5),
                nms_bruteforce(&boxes, &scores, 0.5)
            );
        }
    }

    proptest! {
        #[test]
        fn decode_encode_roundtrip(
            ax1 in 0.0..80.0f64, ay1 in 0.0..80.0f64,
            aw in 2.0..40.0f64, ah in 2.0..40.0f64,
            tx1 in 0.0..80.0f64, ty1 in 0.0..80.0f64,
            tw in 2.0..40.0f64, th in 2.0..40.0f64,
        ) {
            let a = BoxF::new(ax1, ay1, ax1 + aw, ay1 + ah);
            let t = BoxF::new(tx1, ty1, tx1 + tw, ty1 + th);
            let d = encode_deltas(&a, &t);
            let r = decode_deltas(&a, &d);
            prop_assert!((r.x1 - t.x1).abs() < 1e-5);
            prop_assert!((r.y1 - t.y1).abs() < 1e-5);
            prop_assert!((r.x2 - t.x2).abs() < 1e-5);
            prop_assert!((r.y2 - t.y2).abs() < 1e-5);
        }

        #[test]
        fn iou_symmetric_and_bounded(
            x1 in 0.0..50.0f64, y1 in 0.0..50.0f64, w1 in 1.0..30.0f64, h1 in 1.0..30.0f64,
            x2 in 0.0..50.0f64, y2 in 0.0..50.0f64, w2 in 1.0..30.0f64, h2 in 1.0..30.0f64,
        ) {
            let a = BoxF::new(x1, y1, x1 + w1, y1 + h1);
            let b = BoxF::new(x2, y2, x2 + w2, y2 + h2);
            let ab = iou(&a, &b);
            prop_assert!((ab - iou(&b, &a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn nms_kept_pairs_below_threshold(
            seed in 0u64..500,
        ) {
            use rand::Rng;
            let mut rng = crate::rng::rng_from_seed(seed);
            let n = rng.gen_range(1..30);
            let boxes: Vec<BoxF> = (0..n).map(|_| {
                let x1 = rng.gen_range(0.0..60.0);
                let y1 = rng.gen_range(0.0..60.0);
                BoxF::new(x1, y1, x1 + rng.gen_range(1.0..30.0), y1 + rng.gen_range(1.0..30.0))
            }).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let kept = nms(&boxes, &scores, 0.7);
            // kept scores nonincreasing, no kept pair above threshold
            for w in kept.windows(2) {
                prop_assert!(scores[w[0]] >= scores[w[1]]);
            }
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    prop_assert!(iou(&boxes[a], &boxes[b]) <= 0.7);
                }
            }
        }
    }
}
