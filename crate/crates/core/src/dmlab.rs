//! Dynamic multi-level aggregation: per-proposal RoI extraction from every
//! pyramid level, global descriptors, MLP-scored softmax weights, and the
//! weighted feature sum used at the initial decoding step.

use ndarray::{Array1, Array3, ArrayView1, ArrayView3, Axis};
use rand::Rng;

use crate::nn::ops::{softmax1, softmax1_backward};
use crate::nn::params::{GradStore, Init, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Fixed spatial size of aligned RoI features.
pub const ROI_SIZE: usize = 7;
/// Bilinear samples per bin edge (2x2 points per bin).
const SAMPLES_PER_BIN: usize = 2;

/// Proposal box in normalized image coordinates, center format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl ProposalBox {
    /// Clamp to the unit square with a minimal positive extent.
    pub fn clamped(self) -> Self {
        let w = self.w.clamp(1e-4, 1.0);
        let h = self.h.clamp(1e-4, 1.0);
        Self { cx: self.cx.clamp(0.0, 1.0), cy: self.cy.clamp(0.0, 1.0), w, h }
    }
}

fn bilinear_weights(py: f64, px: f64) -> [(isize, isize, f64); 4] {
    // pixel (r, c) has its center at (r + 0.5, c + 0.5)
    let fy = py - 0.5;
    let fx = px - 0.5;
    let y0 = fy.floor();
    let x0 = fx.floor();
    let wy = fy - y0;
    let wx = fx - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    [
        (y0, x0, (1.0 - wy) * (1.0 - wx)),
        (y0, x0 + 1, (1.0 - wy) * wx),
        (y0 + 1, x0, wy * (1.0 - wx)),
        (y0 + 1, x0 + 1, wy * wx),
    ]
}

/// Sample positions for one box on one level, shared by forward and backward.
fn sample_grid(
    feature_hw: (usize, usize),
    b: &ProposalBox,
    stride: usize,
    image_size: (usize, usize),
) -> (Vec<(f64, f64)>, bool) {
    let (img_h, img_w) = image_size;
    let b = b.clamped();
    let x1 = (b.cx - b.w / 2.0) * img_w as f64 / stride as f64;
    let y1 = (b.cy - b.h / 2.0) * img_h as f64 / stride as f64;
    let mut bw = b.w * img_w as f64 / stride as f64;
    let mut bh = b.h * img_h as f64 / stride as f64;
    let mut clamped = false;
    if bw * bh < 1.0 {
        // degenerate on this level: enforce a one-pixel footprint
        bw = bw.max(1.0);
        bh = bh.max(1.0);
        clamped = true;
    }
    let _ = feature_hw;
    let bin_h = bh / ROI_SIZE as f64;
    let bin_w = bw / ROI_SIZE as f64;
    let mut points = Vec::with_capacity(ROI_SIZE * ROI_SIZE * SAMPLES_PER_BIN * SAMPLES_PER_BIN);
    for by in 0..ROI_SIZE {
        for bx in 0..ROI_SIZE {
            for sy in 0..SAMPLES_PER_BIN {
                for sx in 0..SAMPLES_PER_BIN {
                    let py = y1 + (by as f64 + (sy as f64 + 0.5) / SAMPLES_PER_BIN as f64) * bin_h;
                    let px = x1 + (bx as f64 + (sx as f64 + 0.5) / SAMPLES_PER_BIN as f64) * bin_w;
                    points.push((py, px));
                }
            }
        }
    }
    (points, clamped)
}

/// Bilinear RoI alignment to a [C, 7, 7] grid.
///
/// 2x2 sample points per bin, averaged; out-of-bounds samples read as zero.
/// The returned flag is set when the box was degenerate (under one source
/// pixel of area on this level) and had to be clamped.
/// Flattened (bin, plane offset, weight) taps for one box on one level;
/// shared by the forward and backward passes so both stay in sync.
fn sample_taps(
    feature_hw: (usize, usize),
    b: &ProposalBox,
    stride: usize,
    image_size: (usize, usize),
) -> (Vec<(u32, u32, f64)>, bool) {
    let (h, w) = feature_hw;
    let (points, clamped) = sample_grid((h, w), b, stride, image_size);
    let norm = 1.0 / (SAMPLES_PER_BIN * SAMPLES_PER_BIN) as f64;
    let mut taps = Vec::with_capacity(points.len() * 4);
    for (pi, &(py, px)) in points.iter().enumerate() {
        let bin = (pi / (SAMPLES_PER_BIN * SAMPLES_PER_BIN)) as u32;
        for (yy, xx, wt) in bilinear_weights(py, px) {
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || wt == 0.0 {
                continue;
            }
            taps.push((bin, (yy as u32) * w as u32 + xx as u32, wt * norm));
        }
    }
    (taps, clamped)
}

pub fn roi_align<F: Scalar>(
    level: &ArrayView3<'_, F>,
    b: &ProposalBox,
    stride: usize,
    image_size: (usize, usize),
) -> (Array3<F>, bool) {
    let (c, h, w) = level.dim();
    let (taps, clamped) = sample_taps((h, w), b, stride, image_size);
    let mut out = Array3::zeros((c, ROI_SIZE, ROI_SIZE));
    let plane = h * w;
    let grid = ROI_SIZE * ROI_SIZE;
    let out_slice = out.as_slice_mut().unwrap();
    // channel-outer loops over precomputed taps; level planes are small
    // enough to stay cache-resident
    match level.as_slice() {
        Some(lvl) => {
            for ci in 0..c {
                let src = &lvl[ci * plane..(ci + 1) * plane];
                let dst = &mut out_slice[ci * grid..(ci + 1) * grid];
                for &(bin, off, wt) in &taps {
                    dst[bin as usize] += src[off as usize] * F::from_f64(wt);
                }
            }
        }
        None => {
            for ci in 0..c {
                let dst = &mut out_slice[ci * grid..(ci + 1) * grid];
                for &(bin, off, wt) in &taps {
                    let (yy, xx) = ((off as usize) / w, (off as usize) % w);
                    dst[bin as usize] += level[[ci, yy, xx]] * F::from_f64(wt);
                }
            }
        }
    }
    (out, clamped)
}

/// Gradient of [`roi_align`] w.r.t. the feature map (boxes are not
/// differentiated through the sampling grid).
pub fn roi_align_backward<F: Scalar>(
    d_out: &ArrayView3<'_, F>,
    level_dim: (usize, usize, usize),
    b: &ProposalBox,
    stride: usize,
    image_size: (usize, usize),
) -> Array3<F> {
    let (c, h, w) = level_dim;
    let (taps, _) = sample_taps((h, w), b, stride, image_size);
    let mut d_level = Array3::zeros((c, h, w));
    let plane = h * w;
    let grid = ROI_SIZE * ROI_SIZE;
    let dst_all = d_level.as_slice_mut().unwrap();
    let d_out = d_out.to_owned();
    let src_all = d_out.as_slice().unwrap();
    for ci in 0..c {
        let src = &src_all[ci * grid..(ci + 1) * grid];
        let dst = &mut dst_all[ci * plane..(ci + 1) * plane];
        for &(bin, off, wt) in &taps {
            dst[off as usize] += src[bin as usize] * F::from_f64(wt);
        }
    }
    d_level
}

/// Per-channel mean over the aligned grid.
pub fn global_descriptor<F: Scalar>(roi: &ArrayView3<'_, F>) -> Array1<F> {
    let (c, h, w) = roi.dim();
    let n = F::from_f64((h * w) as f64);
    Array1::from_iter((0..c).map(|ci| roi.index_axis(Axis(0), ci).sum() / n))
}

/// Scoring MLP: concatenated descriptors -> hidden (width C') -> one logit
/// per level.
#[derive(Debug, Clone)]
pub struct DmlabMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub channels: usize,
    pub levels: usize,
}

impl DmlabMlp {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        channels: usize,
        levels: usize,
    ) -> Self {
        let in_dim = channels * levels;
        let w1 = ps.register(
            &format!("{name}.w1"),
            &[channels, in_dim],
            Init::KaimingUniform { fan_in: in_dim },
            rng,
        );
        let b1 = ps.register(&format!("{name}.b1"), &[channels], Init::Zeros, rng);
        let w2 = ps.register(
            &format!("{name}.w2"),
            &[levels, channels],
            Init::KaimingUniform { fan_in: channels },
            rng,
        );
        let b2 = ps.register(&format!("{name}.b2"), &[levels], Init::Zeros, rng);
        Self { w1, b1, w2, b2, channels, levels }
    }

    fn forward<F: Scalar>(&self, ps: &ParamStore<F>, g: &ArrayView1<'_, F>) -> (Array1<F>, Array1<F>) {
        let pre_h = ps.view2(self.w1).dot(g) + &ps.view1(self.b1);
        let h = pre_h.mapv(|v| v.max(F::zero()));
        let logits = ps.view2(self.w2).dot(&h) + &ps.view1(self.b2);
        (logits, pre_h)
    }
}

pub struct AggregateCache<F> {
    descriptors: Array1<F>,
    pre_h: Array1<F>,
    pub weights: Array1<F>,
}

/// Softmax-weighted fusion of per-level RoI features.
///
/// Returns the fused [C, 7, 7] feature and the level weights (non-negative,
/// summing to one).
pub fn aggregate<F: Scalar>(
    ps: &ParamStore<F>,
    mlp: &DmlabMlp,
    rois: &[Array3<F>],
) -> (Array3<F>, Array1<F>, AggregateCache<F>) {
    assert!(!rois.is_empty(), "aggregate needs at least one level");
    assert_eq!(rois.len(), mlp.levels, "one RoI feature per level");
    let c = rois[0].dim().0;
    let mut g = Array1::zeros(c * rois.len());
    for (i, roi) in rois.iter().enumerate() {
        let d = global_descriptor(&roi.view());
        g.slice_mut(ndarray::s![i * c..(i + 1) * c]).assign(&d);
    }
    let (logits, pre_h) = mlp.forward(ps, &g.view());
    let weights = softmax1(&logits.view());
    let mut fused = Array3::zeros(rois[0].dim());
    for (i, roi) in rois.iter().enumerate() {
        fused.scaled_add(weights[i], roi);
    }
    let cache = AggregateCache { descriptors: g, pre_h, weights: weights.clone() };
    (fused, weights, cache)
}

/// Backward through [`aggregate`]; returns gradients for each input RoI and
/// accumulates MLP parameter gradients.
pub fn aggregate_backward<F: Scalar>(
    ps: &ParamStore<F>,
    mlp: &DmlabMlp,
    rois: &[Array3<F>],
    cache: &AggregateCache<F>,
    d_fused: &ArrayView3<'_, F>,
    d_weights_extra: Option<&Array1<F>>,
    gs: &mut GradStore<F>,
) -> Vec<Array3<F>> {
    let levels = rois.len();
    let c = rois[0].dim().0;
    let grid = F::from_f64((ROI_SIZE * ROI_SIZE) as f64);

    // fused = sum_i w_i * roi_i
    let mut d_w = Array1::zeros(levels);
    let mut d_rois: Vec<Array3<F>> = Vec::with_capacity(levels);
    for (i, roi) in rois.iter().enumerate() {
        d_w[i] = d_fused.iter().zip(roi.iter()).map(|(&a, &b)| a * b).sum();
        d_rois.push(d_fused.mapv(|v| v * cache.weights[i]));
    }
    if let Some(extra) = d_weights_extra {
        d_w += extra;
    }

    let d_logits = softmax1_backward(&cache.weights.view(), &d_w.view());
    let h = cache.pre_h.mapv(|v| v.max(F::zero()));
    let dw2 = d_logits
        .view()
        .insert_axis(Axis(1))
        .dot(&h.view().insert_axis(Axis(0)));
    gs.add2(ps, mlp.w2, &dw2.view());
    gs.add(ps, mlp.b2, d_logits.as_slice().unwrap());
    let mut dh = ps.view2(mlp.w2).t().dot(&d_logits);
    for (g, &p) in dh.iter_mut().zip(cache.pre_h.iter()) {
        if p <= F::zero() {
            *g = F::zero();
        }
    }
    let dw1 = dh
        .view()
        .insert_axis(Axis(1))
        .dot(&cache.descriptors.view().insert_axis(Axis(0)));
    gs.add2(ps, mlp.w1, &dw1.view());
    gs.add(ps, mlp.b1, dh.as_slice().unwrap());
    let d_g = crate::nn::ops::matvec_transposed(&ps.view2(mlp.w1), &dh.view());

    // descriptor i is the per-channel mean of roi_i
    for (i, d_roi) in d_rois.iter_mut().enumerate() {
        for ci in 0..c {
            let g = d_g[i * c + ci] / grid;
            d_roi.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v + g);
        }
    }
    d_rois
}

/// Independent aggregation of every proposal against the same pyramid.
pub fn dmlab_batch<F: Scalar>(
    ps: &ParamStore<F>,
    mlp: &DmlabMlp,
    pyramid: &[Array3<F>],
    strides: &[usize],
    boxes: &[ProposalBox],
    image_size: (usize, usize),
) -> Vec<(Array3<F>, Array1<F>)> {
    assert!(!boxes.is_empty(), "need at least one proposal");
    assert_eq!(pyramid.len(), strides.len());
    boxes
        .iter()
        .map(|b| {
            let rois: Vec<Array3<F>> = pyramid
                .iter()
                .zip(strides)
                .map(|(lvl, &s)| roi_align(&lvl.view(), b, s, image_size).0)
                .collect();
            let (fused, weights, _) = aggregate(ps, mlp, &rois);
            (fused, weights)
        })
        .collect()
}

/// Standard size-based pyramid level assignment used on refinement steps
/// after the first: k = clamp(floor(4 + log2(sqrt(w·h)/224)), 2, 5).
pub fn select_fpn_level(b: &ProposalBox, image_size: (usize, usize)) -> usize {
    let (img_h, img_w) = image_size;
    let w_px = (b.w * img_w as f64).max(1e-6);
    let h_px = (b.h * img_h as f64).max(1e-6);
    let k = (4.0 + ((w_px * h_px).sqrt() / 224.0).log2()).floor();
    (k as i64).clamp(2, 5) as usize
}


/// Like [`roi_align_backward`] but accumulating straight into an existing
/// pyramid-gradient buffer (hot path of decoder backward).
pub fn roi_align_backward_into<F: Scalar>(
    d_out: &ndarray::ArrayView3<'_, F>,
    d_level: &mut Array3<F>,
    b: &ProposalBox,
    stride: usize,
    image_size: (usize, usize),
) {
    let (c, h, w) = d_level.dim();
    let (taps, _) = sample_taps((h, w), b, stride, image_size);
    let plane = h * w;
    let grid = ROI_SIZE * ROI_SIZE;
    let dst_all = d_level.as_slice_mut().unwrap();
    let d_out = d_out.to_owned();
    let src_all = d_out.as_slice().unwrap();
    for ci in 0..c {
        let src = &src_all[ci * grid..(ci + 1) * grid];
        let dst = &mut dst_all[ci * plane..(ci + 1) * plane];
        for &(bin, off, wt) in &taps {
            dst[off as usize] += src[bin as usize] * F::from_f64(wt);
        }
    }
}
