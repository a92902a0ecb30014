use super::Detection;
use std::cmp::Ordering;

fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| (a.rect.x, a.rect.y, a.rect.w, a.rect.h).cmp(&(b.rect.x, b.rect.y, b.rect.w, b.rect.h)))
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score, ties by `(x, y, w, h)`; a
/// candidate is kept when its IoU with every kept box is at most
/// `iou_threshold`. The result depends only on the input set.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(rank);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| k.rect.iou(&d.rect) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Rect;
    use proptest::prelude::*;

    fn det(x: u32, y: u32, s: u32, score: f64) -> Detection {
        Detection { rect: Rect::new(x, y, s, s), score }
    }

    #[test]
    fn single_detection_kept() {
        let d = det(3, 4, 10, 0.5);
        assert_eq!(nms(vec![d], 0.3), vec![d]);
    }

    #[test]
    fn identical_boxes_keep_higher_score() {
        assert_eq!(nms(vec![det(0, 0, 10, 1.0), det(0, 0, 10, 2.0)], 0.3), vec![det(0, 0, 10, 2.0)]);
    }

    #[test]
    fn disjoint_boxes_kept_in_score_order() {
        let out = nms(vec![det(0, 0, 10, 1.0), det(20, 20, 10, 3.0)], 0.3);
        assert_eq!(out, vec![det(20, 20, 10, 3.0), det(0, 0, 10, 1.0)]);
    }

    #[test]
    fn equal_scores_break_ties_by_position() {
        let out = nms(vec![det(2, 0, 10, 1.0), det(1, 0, 10, 1.0)], 0.3);
        assert_eq!(out, vec![det(1, 0, 10, 1.0)]);
    }

    proptest! {
        #[test]
        fn retained_boxes_do_not_overlap(
            boxes in proptest::collection::vec((0u32..40, 0u32..40, 4u32..20, 0u32..5), 0..30),
            thr in 0.05f64..0.95,
        ) {
            let dets: Vec<_> = boxes.iter().map(|&(x, y, s, sc)| det(x, y, s, sc as f64)).collect();
            let kept = nms(dets, thr);
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.rect.iou(&b.rect) <= thr);
                }
            }
        }

        #[test]
        fn order_invariant(
            boxes in proptest::collection::vec((0u32..40, 0u32..40, 4u32..20, 0u32..5), 0..30),
            seed in any::<u64>(),
        ) {
            let dets: Vec<_> = boxes.iter().map(|&(x, y, s, sc)| det(x, y, s, sc as f64)).collect();
            let mut shuffled = dets.clone();
            // deterministic Fisher-Yates from the seed
            let mut state = seed | 1;
            for i in (1..shuffled.len()).rev() {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                shuffled.swap(i, (state % (i as u64 + 1)) as usize);
            }
            prop_assert_eq!(nms(dets, 0.3), nms(shuffled, 0.3));
        }
    }
}
