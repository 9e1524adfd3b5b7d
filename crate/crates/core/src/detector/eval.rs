//! COCO-style average precision: greedy score-ordered matching per IoU
//! threshold, 101-point interpolated precision, thresholds 0.50:0.05:0.95,
//! mean over classes present in the ground truth.
//!
//! A detection matches only when IoU strictly exceeds the threshold, so a
//! box at exactly IoU 0.6 passes the 0.50 and 0.55 thresholds only.

use serde::{Deserialize, Serialize};

/// Scored, class-labeled detection in pixel corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// (x1, y1, x2, y2) in pixels, clipped to the image.
    pub bbox: [f64; 4],
    pub class: usize,
    pub score: f64,
}

/// Ground-truth box in pixel corner coordinates.
#[derive(Debug, Clone, Copy)]
pub struct GtBox {
    pub bbox: [f64; 4],
    pub class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    /// Percentages in [0, 100].
    pub ap_50_95: f64,
    pub ap_50: f64,
    /// AP 50:95 per class index (classes present in GT only).
    pub per_class: Vec<(usize, f64)>,
}

pub fn iou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = a[2].min(b[2]) - a[0].max(b[0]);
    let iy = a[3].min(b[3]) - a[1].max(b[1]);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter)
}

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Average precision for one class at one IoU threshold via cumulative
/// TP/FP counting and 101-point interpolation.
fn ap_single(
    dets: &[(usize, usize, f64, [f64; 4])], // (image, det index, score, bbox), score-sorted
    gts: &[Vec<[f64; 4]>],                  // per image
    iou_thr: f64,
) -> f64 {
    let num_gt: usize = gts.iter().map(|g| g.len()).sum();
    if num_gt == 0 {
        return f64::NAN;
    }
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(dets.len());
    for &(img, _, _, bbox) in dets {
        let mut best = (0.0f64, usize::MAX);
        for (gi, gbox) in gts[img].iter().enumerate() {
            if matched[img][gi] {
                continue;
            }
            let iou = iou_xyxy(&bbox, gbox);
            if iou > iou_thr && iou > best.0 {
                best = (iou, gi);
            }
        }
        if best.1 != usize::MAX {
            matched[img][best.1] = true;
            tp.push(true);
        } else {
            tp.push(false);
        }
    }
    // precision/recall curve over prefixes
    let mut cum_tp = 0usize;
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    for (k, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            cum_tp += 1;
        }
        precision.push(cum_tp as f64 / (k + 1) as f64);
        recall.push(cum_tp as f64 / num_gt as f64);
    }
    // monotone envelope from the right, then 101-point interpolation
    for k in (0..precision.len().saturating_sub(1)).rev() {
        if precision[k] < precision[k + 1] {
            precision[k] = precision[k + 1];
        }
    }
    let mut ap = 0.0;
    let mut ri = 0usize;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        while ri < recall.len() && recall[ri] < target {
            ri += 1;
        }
        if ri < precision.len() {
            ap += precision[ri];
        }
    }
    ap / 101.0
}

/// Evaluate detections against ground truth (both indexed per image).
pub fn evaluate(detections: &[Vec<Detection>], gts: &[Vec<GtBox>]) -> EvalResult {
    assert_eq!(detections.len(), gts.len(), "per-image lists must align");
    let num_classes = gts
        .iter()
        .flat_map(|g| g.iter().map(|b| b.class))
        .chain(detections.iter().flat_map(|d| d.iter().map(|b| b.class)))
        .max()
        .map_or(0, |c| c + 1);

    let mut per_class = Vec::new();
    let mut per_class_50 = Vec::new();
    for class in 0..num_classes {
        let class_gts: Vec<Vec<[f64; 4]>> = gts
            .iter()
            .map(|g| g.iter().filter(|b| b.class == class).map(|b| b.bbox).collect())
            .collect();
        let num_gt: usize = class_gts.iter().map(|g| g.len()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut class_dets: Vec<(usize, usize, f64, [f64; 4])> = detections
            .iter()
            .enumerate()
            .flat_map(|(img, dets)| {
                dets.iter()
                    .enumerate()
                    .filter(|(_, d)| d.class == class)
                    .map(move |(di, d)| (img, di, d.score, d.bbox))
            })
            .collect();
        // stable, fully deterministic ordering: score desc, then image/index
        class_dets.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        let aps: Vec<f64> = IOU_THRESHOLDS
            .iter()
            .map(|&thr| ap_single(&class_dets, &class_gts, thr))
            .collect();
        let mean_ap = aps.iter().sum::<f64>() / aps.len() as f64;
        per_class.push((class, 100.0 * mean_ap));
        per_class_50.push(100.0 * aps[0]);
    }
    if per_class.is_empty() {
        return EvalResult { ap_50_95: 0.0, ap_50: 0.0, per_class: vec![] };
    }
    let ap_50_95 = per_class.iter().map(|(_, a)| a).sum::<f64>() / per_class.len() as f64;
    let ap_50 = per_class_50.iter().sum::<f64>() / per_class_50.len() as f64;
    EvalResult { ap_50_95, ap_50, per_class }
}

/// Greedy per-class non-maximum suppression.
pub fn nms(mut dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.class == d.class && iou_xyxy(&k.bbox, &d.bbox) > iou_thr);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::scalar::Scalar;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(b: [f64; 4], class: usize, score: f64) -> Detection {
        Detection { bbox: b, class, score }
    }

    fn gt(b: [f64; 4], class: usize) -> GtBox {
        GtBox { bbox: b, class }
    }

    #[test]
    fn perfect_detections_score_hundred() {
        let gts = vec![vec![gt([0.0, 0.0, 10.0, 10.0], 0), gt([20.0, 20.0, 30.0, 35.0], 1)]];
        let dets = vec![vec![
            det([0.0, 0.0, 10.0, 10.0], 0, 1.0),
            det([20.0, 20.0, 30.0, 35.0], 1, 1.0),
        ]];
        let r = evaluate(&dets, &gts);
        assert_abs_diff_eq!(r.ap_50_95, 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.ap_50, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn no_detections_scores_zero() {
        let gts = vec![vec![gt([0.0, 0.0, 10.0, 10.0], 0)]];
        let dets = vec![vec![]];
        let r = evaluate(&dets, &gts);
        assert_eq!(r.ap_50_95, 0.0);
    }

    #[test]
    fn iou_point_six_passes_two_thresholds() {
        // det overlapping gt with IoU = 0.6: AP_50 = 100, AP_50:95 = 20
        // gt [0,0,10,10]; det [0,0,x,10] with x chosen for IoU 0.6:
        // x < 10: IoU = x/10 -> x = 6... that is IoU 0.6 exactly
        let gts = vec![vec![gt([0.0, 0.0, 10.0, 10.0], 0)]];
        let dets = vec![vec![det([0.0, 0.0, 6.0, 10.0], 0, 1.0)]];
        let r = evaluate(&dets, &gts);
        assert_abs_diff_eq!(r.ap_50, 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.ap_50_95, 20.0, epsilon = 1e-9);
    }

    /// Brute-force AP: explicit interpolated-precision construction that
    /// re-evaluates precision/recall at every prefix for every recall point.
    fn ap_bruteforce(
        dets: &[Vec<Detection>],
        gts: &[Vec<GtBox>],
        class: usize,
        iou_thr: f64,
    ) -> f64 {
        let mut all: Vec<(usize, usize, f64, [f64; 4])> = dets
            .iter()
            .enumerate()
            .flat_map(|(img, v)| {
                v.iter()
                    .enumerate()
                    .filter(|(_, d)| d.class == class)
                    .map(move |(di, d)| (img, di, d.score, d.bbox))
            })
            .collect();
        all.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        let num_gt: usize = gts
            .iter()
            .map(|g| g.iter().filter(|b| b.class == class).count())
            .sum();
        if num_gt == 0 {
            return f64::NAN;
        }
        // greedy matching over the full ordered list
        let mut matched: Vec<Vec<bool>> = gts
            .iter()
            .map(|g| vec![false; g.iter().filter(|b| b.class == class).count()])
            .collect();
        let class_boxes: Vec<Vec<[f64; 4]>> = gts
            .iter()
            .map(|g| g.iter().filter(|b| b.class == class).map(|b| b.bbox).collect())
            .collect();
        let mut tp_flags = Vec::new();
        for &(img, _, _, bbox) in &all {
            let mut best = (0.0f64, usize::MAX);
            for (gi, gbox) in class_boxes[img].iter().enumerate() {
                if matched[img][gi] {
                    continue;
                }
                let iou = iou_xyxy(&bbox, gbox);
                if iou > iou_thr && iou > best.0 {
                    best = (iou, gi);
                }
            }
            if best.1 != usize::MAX {
                matched[img][best.1] = true;
                tp_flags.push(true);
            } else {
                tp_flags.push(false);
            }
        }
        // interpolated precision at recall r: max precision over prefixes
        // whose recall reaches r, scanning prefixes explicitly
        let mut ap = 0.0;
        for r in 0..=100 {
            let target = r as f64 / 100.0;
            let mut best_prec = 0.0f64;
            let mut cum = 0usize;
            for (k, &f) in tp_flags.iter().enumerate() {
                if f {
                    cum += 1;
                }
                let recall = cum as f64 / num_gt as f64;
                let prec = cum as f64 / (k + 1) as f64;
                if recall >= target {
                    best_prec = best_prec.max(prec);
                }
            }
            ap += best_prec;
        }
        ap / 101.0
    }

    #[test]
    fn evaluate_matches_bruteforce_on_random_tiny_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _trial in 0..120 {
            let n_img = rng.random_range(1..=5usize);
            let mut gts = Vec::new();
            let mut dets = Vec::new();
            for _ in 0..n_img {
                let n_gt = rng.random_range(0..=4usize);
                let g: Vec<GtBox> = (0..n_gt)
                    .map(|_| {
                        let x = f64::uniform(&mut rng, 0.0, 50.0);
                        let y = f64::uniform(&mut rng, 0.0, 50.0);
                        gt(
                            [x, y, x + f64::uniform(&mut rng, 5.0, 20.0), y + f64::uniform(&mut rng, 5.0, 20.0)],
                            rng.random_range(0..2),
                        )
                    })
                    .collect();
                let n_det = rng.random_range(0..=4usize);
                let d: Vec<Detection> = (0..n_det)
                    .map(|_| {
                        // half the detections perturb a gt, half are random
                        if !g.is_empty() && rng.random_range(0..2) == 0 {
                            let base = g[rng.random_range(0..g.len())];
                            let j = f64::uniform(&mut rng, -3.0, 3.0);
                            det(
                                [base.bbox[0] + j, base.bbox[1] + j, base.bbox[2] + j, base.bbox[3] + j],
                                base.class,
                                f64::uniform(&mut rng, 0.1, 1.0),
                            )
                        } else {
                            let x = f64::uniform(&mut rng, 0.0, 50.0);
                            let y = f64::uniform(&mut rng, 0.0, 50.0);
                            det(
                                [x, y, x + 10.0, y + 10.0],
                                rng.random_range(0..2),
                                f64::uniform(&mut rng, 0.1, 1.0),
                            )
                        }
                    })
                    .collect();
                gts.push(g);
                dets.push(d);
            }
            let r = evaluate(&dets, &gts);
            // compare against brute force per class present
            let mut expected = Vec::new();
            for class in 0..2 {
                let num_gt: usize = gts
                    .iter()
                    .map(|g| g.iter().filter(|b| b.class == class).count())
                    .sum();
                if num_gt == 0 {
                    continue;
                }
                let aps: Vec<f64> = IOU_THRESHOLDS
                    .iter()
                    .map(|&t| ap_bruteforce(&dets, &gts, class, t))
                    .collect();
                expected.push(100.0 * aps.iter().sum::<f64>() / aps.len() as f64);
            }
            if expected.is_empty() {
                assert_eq!(r.ap_50_95, 0.0);
            } else {
                let mean = expected.iter().sum::<f64>() / expected.len() as f64;
                assert_abs_diff_eq!(r.ap_50_95, mean, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn ap50_geq_ap5095_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let g = vec![vec![gt([5.0, 5.0, 25.0, 25.0], 0), gt([30.0, 8.0, 45.0, 28.0], 0)]];
            let d = vec![(0..3)
                .map(|_| {
                    let j = f64::uniform(&mut rng, -4.0, 4.0);
                    det([5.0 + j, 5.0 + j, 25.0 + j, 25.0 + j], 0, f64::uniform(&mut rng, 0.0, 1.0))
                })
                .collect()];
            let r = evaluate(&d, &g);
            assert!(r.ap_50 >= r.ap_50_95 - 1e-9);
        }
    }

    #[test]
    fn nms_suppresses_overlaps_per_class() {
        let dets = vec![
            det([0.0, 0.0, 10.0, 10.0], 0, 0.9),
            det([1.0, 1.0, 11.0, 11.0], 0, 0.8), // overlaps first
            det([1.0, 1.0, 11.0, 11.0], 1, 0.7), // same box, other class
            det([30.0, 30.0, 40.0, 40.0], 0, 0.6),
        ];
        let kept = nms(dets, 0.5);
        assert_eq!(kept.len(), 3);
        assert!(kept.iter().any(|d| d.class == 1));
        // raising the score threshold never increases the count
        let filtered: Vec<_> = kept.iter().filter(|d| d.score >= 0.75).collect();
        assert!(filtered.len() <= kept.len());
    }
}
