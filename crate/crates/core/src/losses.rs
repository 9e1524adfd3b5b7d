//! Training losses: matched classification/regression terms, set-prediction
//! assignment, and the two attention regularizers with their ground-truth
//! mask plumbing.
//!
//! Box-valued losses run in `f64`; the attention regularizers are generic so
//! their gradients feed straight back into the fusion blocks.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Balancing weights of the total loss. `lambda_c` / `lambda_s` hold one
/// entry per fusion block (pyramid level).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub lambda_label: f64,
    pub lambda_bbox: f64,
    pub lambda_giou: f64,
    pub lambda_c: Vec<f64>,
    pub lambda_s: Vec<f64>,
}

impl LossWeights {
    pub fn with_levels(levels: usize) -> Self {
        Self {
            lambda_label: 2.0,
            lambda_bbox: 5.0,
            lambda_giou: 2.0,
            lambda_c: vec![1e-4; levels],
            lambda_s: vec![1e-4; levels],
        }
    }
}

/// One-to-one assignment between predictions and ground truths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// (prediction index, ground-truth index) pairs covering every GT.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
}

// ---------------------------------------------------------------------------
// classification
// ---------------------------------------------------------------------------

fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x), stable on both tails
    if x >= 0.0 {
        -( (-x).exp().ln_1p() )
    } else {
        x - x.exp().ln_1p()
    }
}

/// Sigmoid focal loss over all predictions.
///
/// `targets[i]` is the matched class of prediction i, or `None` for
/// background (all-negative targets). The sum is normalized by the number of
/// matched predictions (minimum one). Returns the loss and d loss / d logits.
pub fn focal_loss(
    logits: &ArrayView2<'_, f64>,
    targets: &[Option<usize>],
    alpha: f64,
    gamma: f64,
) -> (f64, Array2<f64>) {
    let (n, k) = logits.dim();
    assert_eq!(targets.len(), n, "one target entry per prediction");
    let matched = targets.iter().filter(|t| t.is_some()).count().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, k));
    for i in 0..n {
        for c in 0..k {
            let x = logits[[i, c]];
            let y = targets[i] == Some(c);
            let p = 1.0 / (1.0 + (-x).exp());
            let (p_t, alpha_t, log_p_t) = if y {
                (p, alpha, log_sigmoid(x))
            } else {
                (1.0 - p, 1.0 - alpha, log_sigmoid(-x))
            };
            let one_minus = 1.0 - p_t;
            loss += alpha_t * one_minus.powf(gamma) * (-log_p_t);
            // d/dx[-alpha_t (1-p_t)^g log p_t]; dp_t/dx = ±p(1-p)
            let dp_t_dx = if y { p * (1.0 - p) } else { -p * (1.0 - p) };
            let dl_dpt = alpha_t
                * (-gamma * one_minus.powf(gamma - 1.0) * (-log_p_t)
                    - one_minus.powf(gamma) / p_t.max(1e-300));
            grad[[i, c]] = dl_dpt * dp_t_dx / matched;
        }
    }
    (loss / matched, grad)
}

// ---------------------------------------------------------------------------
// regression
// ---------------------------------------------------------------------------

/// (x1, y1, x2, y2) with extents clamped positive; flag set when clamping hit.
fn to_corners(b: &[f64; 4]) -> ([f64; 4], bool) {
    let w = b[2];
    let h = b[3];
    let clamped = w <= 0.0 || h <= 0.0;
    let w = w.max(1e-8);
    let h = h.max(1e-8);
    ([b[0] - w / 2.0, b[1] - h / 2.0, b[0] + w / 2.0, b[1] + h / 2.0], clamped)
}

#[derive(Debug, Clone, Copy)]
pub struct GiouResult {
    /// 1 - GIoU, in [0, 2].
    pub loss: f64,
    /// Gradient w.r.t. the predicted (cx, cy, w, h).
    pub grad_pred: [f64; 4],
    /// Set when a degenerate box extent had to be clamped.
    pub clamped: bool,
}

/// Generalized-IoU loss between center-format boxes.
pub fn giou_loss(pred: &[f64; 4], gt: &[f64; 4]) -> GiouResult {
    let ([px1, py1, px2, py2], c1) = to_corners(pred);
    let ([gx1, gy1, gx2, gy2], c2) = to_corners(gt);

    let ix1 = px1.max(gx1);
    let iy1 = py1.max(gy1);
    let ix2 = px2.min(gx2);
    let iy2 = py2.min(gy2);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;

    let ap = (px2 - px1) * (py2 - py1);
    let ag = (gx2 - gx1) * (gy2 - gy1);
    let union = ap + ag - inter;

    let cx1 = px1.min(gx1);
    let cy1 = py1.min(gy1);
    let cx2 = px2.max(gx2);
    let cy2 = py2.max(gy2);
    let cw = cx2 - cx1;
    let ch = cy2 - cy1;
    let hull = (cw * ch).max(1e-12);

    let iou = inter / union;
    let giou = iou - (hull - union) / hull;
    let loss = 1.0 - giou;

    // partials w.r.t. the predicted corners (subgradients at ties)
    let active = inter > 0.0;
    let d_inter = [
        if active && px1 >= gx1 { -ih } else { 0.0 },
        if active && py1 >= gy1 { -iw } else { 0.0 },
        if active && px2 <= gx2 { ih } else { 0.0 },
        if active && py2 <= gy2 { iw } else { 0.0 },
    ];
    let d_ap = [-(py2 - py1), -(px2 - px1), py2 - py1, px2 - px1];
    let d_hull = [
        if px1 <= gx1 { -ch } else { 0.0 },
        if py1 <= gy1 { -cw } else { 0.0 },
        if px2 >= gx2 { ch } else { 0.0 },
        if py2 >= gy2 { cw } else { 0.0 },
    ];

    let mut d_corners = [0.0; 4];
    for i in 0..4 {
        let d_union = d_ap[i] - d_inter[i];
        let d_iou = (d_inter[i] * union - inter * d_union) / (union * union);
        // penalty = 1 - union/hull
        let d_pen = -d_union / hull + union * d_hull[i] / (hull * hull);
        d_corners[i] = -(d_iou - d_pen);
    }
    // chain to (cx, cy, w, h)
    let grad_pred = [
        d_corners[0] + d_corners[2],
        d_corners[1] + d_corners[3],
        0.5 * (d_corners[2] - d_corners[0]),
        0.5 * (d_corners[3] - d_corners[1]),
    ];
    GiouResult { loss, grad_pred, clamped: c1 || c2 }
}

/// Mean absolute difference over the four normalized coordinates.
pub fn l1_box_loss(pred: &[f64; 4], gt: &[f64; 4]) -> (f64, [f64; 4]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d = pred[i] - gt[i];
        loss += d.abs() / 4.0;
        grad[i] = d.signum() / 4.0;
    }
    (loss, grad)
}

// ---------------------------------------------------------------------------
// assignment
// ---------------------------------------------------------------------------

/// Minimum-cost one-to-one assignment covering all M ground truths.
///
/// `cost` is [N predictions, M ground truths] with finite entries and M <= N.
/// Shortest-augmenting-path algorithm with potentials, O(M · N^2).
pub fn hungarian_match(cost: &ArrayView2<'_, f64>) -> Result<MatchResult> {
    let (n, m) = cost.dim();
    if m > n {
        return Err(Error::InvalidInput(format!(
            "cannot cover {m} ground truths with {n} predictions"
        )));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("assignment costs must be finite".into()));
    }
    if m == 0 {
        return Ok(MatchResult { pairs: vec![], unmatched_preds: (0..n).collect() });
    }

    // 1-indexed potentials; rows = ground truths, columns = predictions
    let inf = f64::INFINITY;
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_gt = vec![0usize; n + 1]; // matched_gt[j] = gt row occupying pred j
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        matched_gt[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_gt[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[j - 1, i0 - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_gt[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_gt[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_gt[j0] = matched_gt[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::with_capacity(m);
    let mut is_matched = vec![false; n];
    for j in 1..=n {
        if matched_gt[j] != 0 {
            pairs.push((j - 1, matched_gt[j] - 1));
            is_matched[j - 1] = true;
        }
    }
    pairs.sort_by_key(|&(_, gt)| gt);
    let unmatched_preds = (0..n).filter(|&j| !is_matched[j]).collect();
    Ok(MatchResult { pairs, unmatched_preds })
}

/// Set-prediction matching cost: lambda_label · focal-style class cost +
/// lambda_bbox · L1 + lambda_giou · (1 - GIoU), per (prediction, gt) pair.
pub fn matching_costs(
    logits: &ArrayView2<'_, f64>,
    pred_boxes: &[[f64; 4]],
    gt_classes: &[usize],
    gt_boxes: &[[f64; 4]],
    weights: &LossWeights,
    alpha: f64,
    gamma: f64,
) -> Array2<f64> {
    let n = pred_boxes.len();
    let m = gt_boxes.len();
    let mut cost = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let x = logits[[i, gt_classes[j]]];
            let p = 1.0 / (1.0 + (-x).exp());
            let pos = alpha * (1.0 - p).powf(gamma) * (-log_sigmoid(x));
            let neg = (1.0 - alpha) * p.powf(gamma) * (-log_sigmoid(-x));
            let class_cost = pos - neg;
            let (l1, _) = l1_box_loss(&pred_boxes[i], &gt_boxes[j]);
            let g = giou_loss(&pred_boxes[i], &gt_boxes[j]).loss;
            cost[[i, j]] = weights.lambda_label * class_cost
                + weights.lambda_bbox * l1
                + weights.lambda_giou * g;
        }
    }
    cost
}

// ---------------------------------------------------------------------------
// attention regularizers
// ---------------------------------------------------------------------------

/// L1 penalty on the channel attention maps: sum_k lambda_c^k · |M_c^k|_1.
///
/// Returns the loss and d loss / d m_c per level.
pub fn channel_saliency_reg<F: Scalar>(
    m_c_list: &[Array1<F>],
    lambda_c: &[f64],
) -> (f64, Vec<Array1<F>>) {
    assert_eq!(m_c_list.len(), lambda_c.len(), "one weight per level");
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(m_c_list.len());
    for (m_c, &lam) in m_c_list.iter().zip(lambda_c) {
        loss += lam * m_c.iter().map(|v| v.into_f64().abs()).sum::<f64>();
        grads.push(m_c.mapv(|v| F::from_f64(lam) * v.signum()));
    }
    (loss, grads)
}

/// Binary mask [H, W]: pixel is 1 iff its center lies inside any box
/// (inclusive of boundaries). Boxes are (x1, y1, x2, y2) in pixel units.
pub fn rasterize_boxes(gt_boxes_xyxy: &[[f64; 4]], h: usize, w: usize) -> Array2<f64> {
    let mut mask = Array2::zeros((h, w));
    for b in gt_boxes_xyxy {
        let (x1, y1, x2, y2) = (b[0], b[1], b[2], b[3]);
        for y in 0..h {
            let cy = y as f64 + 0.5;
            if cy < y1 || cy > y2 {
                continue;
            }
            for x in 0..w {
                let cx = x as f64 + 0.5;
                if cx >= x1 && cx <= x2 {
                    mask[[y, x]] = 1.0;
                }
            }
        }
    }
    mask
}

/// Bilinear resize (align-corners false, border clamp) followed by
/// quantization at 0.5 (values >= 0.5 become 1).
pub fn resize_mask(mask: &ArrayView2<'_, f64>, h_k: usize, w_k: usize) -> Array2<f64> {
    assert!(h_k >= 1 && w_k >= 1, "target sizes must be at least 1");
    let (h, w) = mask.dim();
    if (h, w) == (h_k, w_k) {
        return mask.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    }
    let sy = h as f64 / h_k as f64;
    let sx = w as f64 / w_k as f64;
    let mut out = Array2::zeros((h_k, w_k));
    for oy in 0..h_k {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..w_k {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let v = mask[[y0, x0]] * (1.0 - wy) * (1.0 - wx)
                + mask[[y0, x1]] * (1.0 - wy) * wx
                + mask[[y1, x0]] * wy * (1.0 - wx)
                + mask[[y1, x1]] * wy * wx;
            out[[oy, ox]] = if v >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    out
}

/// Object-focused spatial regularization.
///
/// Per level: D = (m_s ⊙ mask) - mask, contribution lambda_s^k · ||D||_2^2 =
/// lambda_s^k · sum over mask-interior pixels of (m_s - 1)^2. Values outside
/// the mask do not contribute unless `exterior_penalty` is set, which adds
/// lambda_s^k · sum of exterior m_s^2 (off by default).
pub fn spatial_focus_reg<F: Scalar>(
    m_s_list: &[Array2<F>],
    masks: &[Array2<f64>],
    lambda_s: &[f64],
    exterior_penalty: bool,
) -> Result<(f64, Vec<Array2<F>>)> {
    if m_s_list.len() != masks.len() || m_s_list.len() != lambda_s.len() {
        return Err(Error::Config("per-level lists must align".into()));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(m_s_list.len());
    for ((m_s, mask), &lam) in m_s_list.iter().zip(masks).zip(lambda_s) {
        if m_s.dim() != mask.dim() {
            return Err(Error::Config(format!(
                "attention map {:?} does not match mask {:?}",
                m_s.dim(),
                mask.dim()
            )));
        }
        let mut grad = Array2::zeros(m_s.dim());
        for ((idx, &m), &b) in m_s.indexed_iter().zip(mask.iter()) {
            let mf = m.into_f64();
            if b >= 0.5 {
                loss += lam * (mf - 1.0) * (mf - 1.0);
                grad[idx] = F::from_f64(lam * 2.0 * (mf - 1.0));
            } else if exterior_penalty {
                loss += lam * mf * mf;
                grad[idx] = F::from_f64(lam * 2.0 * mf);
            }
        }
        grads.push(grad);
    }
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// total
// ---------------------------------------------------------------------------

/// Per-term breakdown written to the training CSV.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub label: f64,
    pub bbox: f64,
    pub giou: f64,
    pub theta_mc: f64,
    pub theta_ms: f64,
    pub total: f64,
}

/// Weighted total: the lambda_c/lambda_s factors are already inside the two
/// theta terms, so only the three main weights apply here.
pub fn total_loss(
    label: f64,
    bbox: f64,
    giou: f64,
    theta_mc: f64,
    theta_ms: f64,
    weights: &LossWeights,
) -> LossBreakdown {
    let total = weights.lambda_label * label
        + weights.lambda_bbox * bbox
        + weights.lambda_giou * giou
        + theta_mc
        + theta_ms;
    LossBreakdown { label, bbox, giou, theta_mc, theta_ms, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // ---------------- focal ----------------

    #[test]
    fn focal_confident_correct_is_tiny() {
        let mut logits = Array2::from_elem((3, 2), -20.0);
        logits[[0, 1]] = 20.0;
        let targets = vec![Some(1), None, None];
        let (loss, _) = focal_loss(&logits.view(), &targets, 0.25, 2.0);
        assert!(loss < 1e-6);
    }

    #[test]
    fn focal_gamma_zero_equals_half_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = Array2::from_shape_fn((4, 3), |_| f64::uniform(&mut rng, -2.0, 2.0));
        let targets = vec![Some(0), Some(2), None, Some(1)];
        let (loss, _) = focal_loss(&logits.view(), &targets, 0.5, 0.0);
        // loop oracle: 0.5 * binary cross entropy per entry
        let mut bce = 0.0;
        for i in 0..4 {
            for c in 0..3 {
                let x: f64 = logits[[i, c]];
                let p = 1.0 / (1.0 + (-x).exp());
                let y = if targets[i] == Some(c) { 1.0 } else { 0.0 };
                bce += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            }
        }
        assert_abs_diff_eq!(loss, 0.5 * bce / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn focal_closed_form_single_prediction() {
        // p = 0.5 (logit 0), positive target, alpha 0.25, gamma 2 ->
        // 0.25 * 0.25 * ln 2
        let logits = Array2::zeros((1, 1));
        let (loss, _) = focal_loss(&logits.view(), &[Some(0)], 0.25, 2.0);
        assert_abs_diff_eq!(loss, 0.25 * 0.25 * 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut logits = Array2::from_shape_fn((5, 3), |_| f64::uniform(&mut rng, -2.0, 2.0));
        let targets = vec![Some(1), None, Some(0), Some(2), None];
        let (_, grad) = focal_loss(&logits.view(), &targets, 0.25, 2.0);
        for idx in ndarray::indices((5, 3)) {
            let orig = logits[idx];
            logits[idx] = orig + 1e-6;
            let (fp, _) = focal_loss(&logits.view(), &targets, 0.25, 2.0);
            logits[idx] = orig - 1e-6;
            let (fm, _) = focal_loss(&logits.view(), &targets, 0.25, 2.0);
            logits[idx] = orig;
            let fd = (fp - fm) / 2e-6;
            assert_abs_diff_eq!(grad[idx], fd, epsilon = 1e-6);
        }
    }

    // ---------------- giou / l1 ----------------

    #[test]
    fn giou_identical_boxes_zero() {
        let b = [0.4, 0.6, 0.2, 0.3];
        let r = giou_loss(&b, &b);
        assert_abs_diff_eq!(r.loss, 0.0, epsilon = 1e-12);
        assert!(!r.clamped);
    }

    #[test]
    fn giou_touching_unit_squares_is_one() {
        // unit squares side by side: IoU 0, hull = union -> loss 1
        let a = [0.5, 0.5, 1.0, 1.0];
        let b = [1.5, 0.5, 1.0, 1.0];
        let r = giou_loss(&a, &b);
        assert_abs_diff_eq!(r.loss, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn giou_far_separation_approaches_two() {
        let a = [0.0, 0.0, 1.0, 1.0];
        let b = [1000.0, 0.0, 1.0, 1.0];
        let r = giou_loss(&a, &b);
        assert!(r.loss > 1.9 && r.loss <= 2.0);
    }

    #[test]
    fn giou_zero_area_clamped_and_flagged() {
        let r = giou_loss(&[0.5, 0.5, 0.0, 0.2], &[0.5, 0.5, 0.2, 0.2]);
        assert!(r.clamped);
        assert!(r.loss.is_finite());
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let pred = [
                f64::uniform(&mut rng, 0.2, 0.8),
                f64::uniform(&mut rng, 0.2, 0.8),
                f64::uniform(&mut rng, 0.1, 0.5),
                f64::uniform(&mut rng, 0.1, 0.5),
            ];
            let gt = [
                f64::uniform(&mut rng, 0.2, 0.8),
                f64::uniform(&mut rng, 0.2, 0.8),
                f64::uniform(&mut rng, 0.1, 0.5),
                f64::uniform(&mut rng, 0.1, 0.5),
            ];
            let r = giou_loss(&pred, &gt);
            for i in 0..4 {
                let mut p = pred;
                p[i] += 1e-6;
                let fp = giou_loss(&p, &gt).loss;
                p[i] = pred[i] - 1e-6;
                let fm = giou_loss(&p, &gt).loss;
                let fd = (fp - fm) / 2e-6;
                assert_abs_diff_eq!(r.grad_pred[i], fd, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn l1_examples_and_oracle() {
        let b = [0.1, 0.2, 0.3, 0.4];
        assert_abs_diff_eq!(l1_box_loss(&b, &b).0, 0.0);
        let shifted = [0.2, 0.3, 0.4, 0.5];
        assert_abs_diff_eq!(l1_box_loss(&b, &shifted).0, 0.1, epsilon = 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a: [f64; 4] = std::array::from_fn(|_| f64::uniform(&mut rng, 0.0, 1.0));
            let b: [f64; 4] = std::array::from_fn(|_| f64::uniform(&mut rng, 0.0, 1.0));
            let oracle: f64 = (0..4).map(|i| (a[i] - b[i]).abs()).sum::<f64>() / 4.0;
            assert_abs_diff_eq!(l1_box_loss(&a, &b).0, oracle, epsilon = 1e-12);
        }
    }

    // ---------------- hungarian ----------------

    fn brute_force_match(cost: &Array2<f64>) -> f64 {
        // enumerate all injections of gts into preds
        let (n, m) = cost.dim();
        fn rec(cost: &Array2<f64>, gt: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let (n, m) = cost.dim();
            if gt == m {
                *best = best.min(acc);
                return;
            }
            for p in 0..n {
                if !used[p] {
                    used[p] = true;
                    rec(cost, gt + 1, used, acc + cost[[p, gt]], best);
                    used[p] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; n], 0.0, &mut best);
        let _ = m;
        best
    }

    #[test]
    fn hungarian_trivial_and_errors() {
        let c = Array2::from_elem((1, 1), 3.0);
        let r = hungarian_match(&c.view()).unwrap();
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert!(r.unmatched_preds.is_empty());

        let too_many = Array2::zeros((1, 2));
        assert!(hungarian_match(&too_many.view()).is_err());
        let nan = Array2::from_elem((2, 1), f64::NAN);
        assert!(hungarian_match(&nan.view()).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..200 {
            let m = rng.random_range(1..=4usize);
            let n = rng.random_range(m..=6usize);
            let cost = Array2::from_shape_fn((n, m), |_| f64::uniform(&mut rng, -3.0, 3.0));
            let r = hungarian_match(&cost.view()).unwrap();
            assert_eq!(r.pairs.len(), m, "trial {trial}: every gt covered");
            let total: f64 = r.pairs.iter().map(|&(p, g)| cost[[p, g]]).sum();
            let best = brute_force_match(&cost);
            assert_abs_diff_eq!(total, best, epsilon = 1e-9);
            // one-to-one
            let mut seen = std::collections::HashSet::new();
            for &(p, _) in &r.pairs {
                assert!(seen.insert(p), "prediction used twice");
            }
        }
    }

    // ---------------- regularizers ----------------

    #[test]
    fn channel_saliency_counting_and_oracle() {
        let zero = vec![Array1::<f64>::zeros(4)];
        assert_abs_diff_eq!(channel_saliency_reg(&zero, &[1.0]).0, 0.0);
        let ones = vec![Array1::<f64>::from_elem(4, 1.0)];
        assert_abs_diff_eq!(channel_saliency_reg(&ones, &[1.0]).0, 4.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let maps: Vec<Array1<f64>> = (0..3)
            .map(|_| Array1::from_shape_fn(5, |_| f64::uniform(&mut rng, 0.0, 1.0)))
            .collect();
        let lams = [0.5, 1.5, 2.0];
        let (loss, grads) = channel_saliency_reg(&maps, &lams);
        let oracle: f64 = maps
            .iter()
            .zip(&lams)
            .map(|(m, &l)| l * m.iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        assert_abs_diff_eq!(loss, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(grads[1][0], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn rasterize_examples() {
        assert_eq!(rasterize_boxes(&[], 4, 4).sum(), 0.0);
        let full = rasterize_boxes(&[[0.0, 0.0, 8.0, 8.0]], 8, 8);
        assert_eq!(full.sum(), 64.0);
        // 3x3 box at pixels (2..5) x (2..5)
        let m = rasterize_boxes(&[[2.0, 2.0, 5.0, 5.0]], 8, 8);
        assert_eq!(m.sum(), 9.0);
        for y in 2..5 {
            for x in 2..5 {
                assert_eq!(m[[y, x]], 1.0);
            }
        }
    }

    #[test]
    fn resize_mask_examples() {
        let ones = Array2::from_elem((8, 8), 1.0);
        for (h, w) in [(8, 8), (4, 4), (2, 2), (3, 5)] {
            let r = resize_mask(&ones.view(), h, w);
            assert_eq!(r.sum(), (h * w) as f64, "all-ones survives at {h}x{w}");
        }
        // 4x4 block inside 8x8, 2x downsample -> 2x2 block
        let mask = rasterize_boxes(&[[2.0, 2.0, 6.0, 6.0]], 8, 8);
        let r = resize_mask(&mask.view(), 4, 4);
        assert_eq!(r.sum(), 4.0);
        for y in 1..3 {
            for x in 1..3 {
                assert_eq!(r[[y, x]], 1.0);
            }
        }
        // idempotent at identical size
        let same = resize_mask(&mask.view(), 8, 8);
        assert_eq!(same, mask);
    }

    #[test]
    fn spatial_focus_examples() {
        let mask = rasterize_boxes(&[[1.0, 1.0, 4.0, 4.0]], 6, 6);
        let p = mask.sum();
        // m_s = 1 inside, junk outside -> 0
        let mut m_s = Array2::from_elem((6, 6), 0.37);
        for ((y, x), v) in m_s.indexed_iter_mut() {
            if mask[[y, x]] >= 0.5 {
                *v = 1.0;
            }
        }
        let (loss, _) =
            spatial_focus_reg(&[m_s], &[mask.clone()], &[1.0], false).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);

        // m_s = 0 everywhere -> P
        let zero = Array2::<f64>::zeros((6, 6));
        let (loss, grads) =
            spatial_focus_reg(&[zero.clone()], &[mask.clone()], &[1.0], false).unwrap();
        assert_abs_diff_eq!(loss, p, epsilon = 1e-12);
        // gradient only inside the mask
        for ((y, x), g) in grads[0].indexed_iter() {
            if mask[[y, x]] >= 0.5 {
                assert_abs_diff_eq!(*g, -2.0, epsilon = 1e-12);
            } else {
                assert_eq!(*g, 0.0);
            }
        }

        // empty mask -> 0 regardless
        let empty = Array2::<f64>::zeros((6, 6));
        let (loss, _) = spatial_focus_reg(&[zero], &[empty], &[1.0], false).unwrap();
        assert_abs_diff_eq!(loss, 0.0);

        // shape mismatch -> config error
        let bad = spatial_focus_reg(
            &[Array2::<f64>::zeros((3, 3))],
            &[mask],
            &[1.0],
            false,
        );
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn spatial_focus_exterior_values_do_not_change_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mask = rasterize_boxes(&[[0.0, 0.0, 3.0, 3.0]], 5, 5);
        let m1 = Array2::from_shape_fn((5, 5), |_| f64::uniform(&mut rng, 0.0, 1.0));
        let mut m2 = m1.clone();
        for ((y, x), v) in m2.indexed_iter_mut() {
            if mask[[y, x]] < 0.5 {
                *v = f64::uniform(&mut rng, 0.0, 1.0);
            }
        }
        let (l1, _) = spatial_focus_reg(&[m1], &[mask.clone()], &[2.0], false).unwrap();
        let (l2, _) = spatial_focus_reg(&[m2], &[mask], &[2.0], false).unwrap();
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-12);
    }

    #[test]
    fn spatial_focus_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mask = rasterize_boxes(&[[1.0, 0.0, 4.0, 3.0]], 5, 5);
        let m_s = Array2::from_shape_fn((5, 5), |_| f64::uniform(&mut rng, 0.05, 0.95));
        let (_, grads) =
            spatial_focus_reg(&[m_s.clone()], &[mask.clone()], &[1.7], true).unwrap();
        for idx in ndarray::indices((5, 5)) {
            let mut m = m_s.clone();
            m[idx] += 1e-6;
            let (fp, _) = spatial_focus_reg(&[m.clone()], &[mask.clone()], &[1.7], true).unwrap();
            m[idx] = m_s[idx] - 1e-6;
            let (fm, _) = spatial_focus_reg(&[m], &[mask.clone()], &[1.7], true).unwrap();
            let fd = (fp - fm) / 2e-6;
            assert_abs_diff_eq!(grads[0][idx], fd, epsilon = 1e-5);
        }
    }

    // ---------------- total ----------------

    #[test]
    fn total_loss_weighting_and_linearity() {
        let w = LossWeights::with_levels(4);
        let zero = total_loss(0.0, 0.0, 0.0, 0.0, 0.0, &w);
        assert_eq!(zero.total, 0.0);

        let unit = total_loss(1.0, 1.0, 1.0, 0.3, 0.2, &w);
        assert_abs_diff_eq!(unit.total, 2.0 + 5.0 + 2.0 + 0.5, epsilon = 1e-12);

        let mut w2 = w.clone();
        w2.lambda_bbox *= 2.0;
        let doubled = total_loss(1.0, 1.0, 1.0, 0.3, 0.2, &w2);
        assert_abs_diff_eq!(doubled.total - unit.total, 5.0, epsilon = 1e-12);
    }

    // make Array3 import used in this module's scope for mask helpers
    #[allow(dead_code)]
    fn _touch(_: Array3<f64>) {}
}
