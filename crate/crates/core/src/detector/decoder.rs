//! Per-proposal decoder head.
//!
//! Step S0 builds each proposal's feature by dynamic multi-level aggregation;
//! later steps pick one pyramid level by box size. The flattened RoI feature
//! goes through a linear projection, a time embedding, optional
//! cross-attention against the previous step's per-box features (output
//! projection zero-initialized so an untrained attention path is a no-op),
//! and a small FFN; two heads emit class logits and box deltas applied in
//! center format.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use crate::dmlab::{
    aggregate, aggregate_backward, global_descriptor, roi_align, roi_align_backward_into,
    select_fpn_level, AggregateCache, DmlabMlp, ProposalBox, ROI_SIZE,
};
use crate::nn::linear::Linear;
use crate::nn::norm::{LayerNorm, LayerNormCache};
use crate::nn::ops::{relu2, relu2_backward};
use crate::nn::params::{GradStore, Init, ParamStore};
use crate::scalar::Scalar;

use super::config::{ModelConfig, FPN_STRIDES, NUM_LEVELS};

const DELTA_CLAMP: f64 = 4.0;
const MIN_BOX_EXTENT: f64 = 1e-3;

pub struct Decoder {
    pub dmlab: DmlabMlp,
    roi_proj: Linear,
    time1: Linear,
    time2: Linear,
    attn_q: Linear,
    attn_k: Linear,
    attn_v: Linear,
    attn_o: Linear,
    ln1: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    ln2: LayerNorm,
    cls: Linear,
    reg: Linear,
    pub d_model: usize,
    pub num_classes: usize,
    c_prime: usize,
    time_dim: usize,
}

pub struct AttnCachePart<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    attn: Array2<F>,
    ctx: Array2<F>,
    prev: Array2<F>,
}

pub struct DecoderCache<F> {
    step0: bool,
    boxes: Vec<ProposalBox>,
    /// Per box: one RoI per level (step 0) or a single RoI (later steps).
    rois: Vec<Vec<Array3<F>>>,
    agg: Vec<AggregateCache<F>>,
    levels: Vec<usize>,
    flat: Array2<F>,
    f0_pre: Array2<F>,
    time_emb_in: Array1<F>,
    time_h_pre: Array1<F>,
    ln1c: LayerNormCache<F>,
    f1n: Array2<F>,
    attn: Option<AttnCachePart<F>>,
    f2: Array2<F>,
    g1_pre: Array2<F>,
    ln2c: LayerNormCache<F>,
    f3n: Array2<F>,
    /// d pred / d delta diagonal factors; zero where output clamps engaged.
    delta_jac: Vec<[f64; 4]>,
    pyramid_dims: Vec<(usize, usize, usize)>,
    image_size: (usize, usize),
}

pub struct DecoderOutput<F> {
    pub logits: Array2<F>,
    /// Refined boxes, normalized center format, clamped to the unit square.
    pub pred_boxes: Vec<[f64; 4]>,
    /// Per-box features handed to the next refinement step.
    pub feats: Array2<F>,
    /// Aggregation weights per box and level (step 0 only).
    pub dmlab_weights: Option<Array2<F>>,
}

impl Decoder {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        cfg: &ModelConfig,
    ) -> Self {
        let d = cfg.d_model;
        let flat_dim = cfg.c_prime * ROI_SIZE * ROI_SIZE;
        let dmlab = DmlabMlp::new(ps, rng, "dec.dmlab", cfg.c_prime, NUM_LEVELS);
        let roi_proj = Linear::new(ps, rng, "dec.roi_proj", flat_dim, d, true);
        let time1 = Linear::new(ps, rng, "dec.time1", cfg.time_dim, d, true);
        let time2 = Linear::new(ps, rng, "dec.time2", d, d, true);
        let attn_q = Linear::new(ps, rng, "dec.attn.q", d, d, true);
        let attn_k = Linear::new(ps, rng, "dec.attn.k", d, d, true);
        let attn_v = Linear::new(ps, rng, "dec.attn.v", d, d, true);
        // zero-init output projection: untrained cross-attention is identity
        let attn_o = Linear::with_init(ps, rng, "dec.attn.o", d, d, true, Init::Zeros);
        let ln1 = LayerNorm::new(ps, rng, "dec.ln1", d);
        let ffn1 = Linear::new(ps, rng, "dec.ffn1", d, 2 * d, true);
        let ffn2 = Linear::new(ps, rng, "dec.ffn2", 2 * d, d, true);
        let ln2 = LayerNorm::new(ps, rng, "dec.ln2", d);
        let cls = Linear::new(ps, rng, "dec.cls", d, cfg.num_classes, true);
        let reg = Linear::new(ps, rng, "dec.reg", d, 4, true);
        // focal-friendly prior: background-dominated logits start low
        let prior = -(((1.0 - 0.01f64) / 0.01).ln());
        for v in ps.slice_mut(cls.b.unwrap()) {
            *v = F::from_f64(prior);
        }
        Self {
            dmlab,
            roi_proj,
            time1,
            time2,
            attn_q,
            attn_k,
            attn_v,
            attn_o,
            ln1,
            ffn1,
            ffn2,
            ln2,
            cls,
            reg,
            d_model: d,
            num_classes: cfg.num_classes,
            c_prime: cfg.c_prime,
            time_dim: cfg.time_dim,
        }
    }

    fn sincos_embedding<F: Scalar>(&self, t: usize) -> Array1<F> {
        let half = self.time_dim / 2;
        let mut e = Array1::zeros(self.time_dim);
        for i in 0..half {
            let freq = (10000.0f64).powf(-(i as f64) / half as f64);
            let arg = t as f64 * freq;
            e[2 * i] = F::from_f64(arg.sin());
            e[2 * i + 1] = F::from_f64(arg.cos());
        }
        e
    }

    fn apply_deltas(b: &ProposalBox, d: [f64; 4]) -> ([f64; 4], [f64; 4]) {
        let mut jac = [b.w, b.h, 0.0, 0.0];
        let cx = b.cx + d[0] * b.w;
        let cy = b.cy + d[1] * b.h;
        let dw = d[2].clamp(-DELTA_CLAMP, DELTA_CLAMP);
        let dh = d[3].clamp(-DELTA_CLAMP, DELTA_CLAMP);
        let w = b.w * dw.exp();
        let h = b.h * dh.exp();
        // clamp to the unit square; zero the jacobian where a clamp engages
        let out = [
            cx.clamp(0.0, 1.0),
            cy.clamp(0.0, 1.0),
            w.clamp(MIN_BOX_EXTENT, 1.0),
            h.clamp(MIN_BOX_EXTENT, 1.0),
        ];
        if out[0] != cx {
            jac[0] = 0.0;
        }
        if out[1] != cy {
            jac[1] = 0.0;
        }
        jac[2] = if out[2] == w && d[2] == dw { w } else { 0.0 };
        jac[3] = if out[3] == h && d[3] == dh { h } else { 0.0 };
        (out, jac)
    }

    /// One refinement step over all proposals.
    pub fn forward_step<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        pyramid: &[Array3<F>],
        boxes: &[ProposalBox],
        prev_feats: Option<&ArrayView2<'_, F>>,
        t: usize,
        step0: bool,
        image_size: (usize, usize),
    ) -> (DecoderOutput<F>, DecoderCache<F>) {
        let n = boxes.len();
        let flat_dim = self.c_prime * ROI_SIZE * ROI_SIZE;
        let mut flat = Array2::zeros((n, flat_dim));
        let mut rois: Vec<Vec<Array3<F>>> = Vec::with_capacity(n);
        let mut agg: Vec<AggregateCache<F>> = Vec::with_capacity(n);
        let mut levels: Vec<usize> = Vec::with_capacity(n);
        let mut dmlab_weights = step0.then(|| Array2::zeros((n, NUM_LEVELS)));

        for (bi, b) in boxes.iter().enumerate() {
            let fused = if step0 {
                let per_level: Vec<Array3<F>> = pyramid
                    .iter()
                    .zip(FPN_STRIDES.iter())
                    .map(|(lvl, &s)| roi_align(&lvl.view(), b, s, image_size).0)
                    .collect();
                let (fused, weights, cache) = aggregate(ps, &self.dmlab, &per_level);
                if let Some(wm) = dmlab_weights.as_mut() {
                    wm.row_mut(bi).assign(&weights);
                }
                rois.push(per_level);
                agg.push(cache);
                fused
            } else {
                let lvl = select_fpn_level(b, image_size);
                let li = lvl - 2; // P2..P5 -> 0..3
                let (roi, _) = roi_align(&pyramid[li].view(), b, FPN_STRIDES[li], image_size);
                levels.push(li);
                rois.push(vec![roi.clone()]);
                roi
            };
            let row = fused.into_shape_with_order(flat_dim).unwrap();
            flat.row_mut(bi).assign(&row);
        }

        let f0_pre = self.roi_proj.forward(ps, &flat.view());
        let f0 = relu2(&f0_pre.view());

        let time_emb_in = self.sincos_embedding::<F>(t);
        let th_pre = self
            .time1
            .forward(ps, &time_emb_in.view().insert_axis(Axis(0)));
        let time_h_pre = th_pre.row(0).to_owned();
        let th = time_h_pre.mapv(|v| v.max(F::zero()));
        let temb = self
            .time2
            .forward(ps, &th.view().insert_axis(Axis(0)))
            .row(0)
            .to_owned();

        let mut f1 = f0;
        for mut row in f1.rows_mut() {
            row += &temb;
        }
        let (f1n, ln1c) = self.ln1.forward(ps, &f1.view());

        let (f2, attn_cache) = match prev_feats {
            Some(prev) => {
                let scale = F::from_f64(1.0 / (self.d_model as f64).sqrt());
                let q = self.attn_q.forward(ps, &f1n.view());
                let k = self.attn_k.forward(ps, &prev.view());
                let v = self.attn_v.forward(ps, &prev.view());
                let scores = q.dot(&k.t()).mapv(|s| s * scale);
                let mut attn = Array2::zeros(scores.dim());
                for (i, row) in scores.rows().into_iter().enumerate() {
                    attn.row_mut(i)
                        .assign(&crate::nn::ops::softmax1(&row));
                }
                let ctx = attn.dot(&v);
                let proj = self.attn_o.forward(ps, &ctx.view());
                let f2 = &f1n + &proj;
                (
                    f2,
                    Some(AttnCachePart { q, k, v, attn, ctx, prev: prev.to_owned() }),
                )
            }
            None => (f1n.clone(), None),
        };

        let g1_pre = self.ffn1.forward(ps, &f2.view());
        let g1 = relu2(&g1_pre.view());
        let g2 = self.ffn2.forward(ps, &g1.view());
        let f3 = &f2 + &g2;
        let (f3n, ln2c) = self.ln2.forward(ps, &f3.view());

        let logits = self.cls.forward(ps, &f3n.view());
        let deltas = self.reg.forward(ps, &f3n.view());

        let mut pred_boxes = Vec::with_capacity(n);
        let mut delta_jac = Vec::with_capacity(n);
        for (bi, b) in boxes.iter().enumerate() {
            let d = [
                deltas[[bi, 0]].into_f64(),
                deltas[[bi, 1]].into_f64(),
                deltas[[bi, 2]].into_f64(),
                deltas[[bi, 3]].into_f64(),
            ];
            let (out, jac) = Self::apply_deltas(b, d);
            pred_boxes.push(out);
            delta_jac.push(jac);
        }

        let pyramid_dims = pyramid.iter().map(|p| p.dim()).collect();
        let output = DecoderOutput {
            logits,
            pred_boxes,
            feats: f3n.clone(),
            dmlab_weights,
        };
        let cache = DecoderCache {
            step0,
            boxes: boxes.to_vec(),
            rois,
            agg,
            levels,
            flat,
            f0_pre,
            time_emb_in,
            time_h_pre,
            ln1c,
            f1n,
            attn: attn_cache,
            f2,
            g1_pre,
            ln2c,
            f3n,
            delta_jac,
            pyramid_dims,
            image_size,
        };
        (output, cache)
    }

    /// Backward from (d logits, d predicted boxes) to pyramid gradients and,
    /// when cross-attention ran, gradients for the previous step's features.
    pub fn backward_step<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &DecoderCache<F>,
        d_logits: &ArrayView2<'_, F>,
        d_pred: &ArrayView2<'_, f64>,
        gs: &mut GradStore<F>,
    ) -> (Vec<Array3<F>>, Option<Array2<F>>) {
        let n = cache.boxes.len();

        let mut d_deltas = Array2::zeros((n, 4));
        for i in 0..n {
            for j in 0..4 {
                d_deltas[[i, j]] = F::from_f64(d_pred[[i, j]] * cache.delta_jac[i][j]);
            }
        }

        let mut d_f3n = self.cls.backward(ps, &cache.f3n.view(), d_logits, gs);
        d_f3n += &self.reg.backward(ps, &cache.f3n.view(), &d_deltas.view(), gs);
        let d_f3 = self.ln2.backward(ps, &cache.ln2c, &d_f3n.view(), gs);

        // f3 = f2 + ffn2(relu(ffn1(f2)))
        let g1 = relu2(&cache.g1_pre.view());
        let d_g1 = self.ffn2.backward(ps, &g1.view(), &d_f3.view(), gs);
        let d_g1_pre = relu2_backward(&cache.g1_pre.view(), &d_g1.view());
        let mut d_f2 = self.ffn1.backward(ps, &cache.f2.view(), &d_g1_pre.view(), gs);
        d_f2 += &d_f3;

        // attention residual
        let (mut d_f1n, d_prev) = match &cache.attn {
            Some(a) => {
                let scale = F::from_f64(1.0 / (self.d_model as f64).sqrt());
                let d_proj = d_f2.clone();
                let d_ctx = self.attn_o.backward(ps, &a.ctx.view(), &d_proj.view(), gs);
                let d_attn = d_ctx.dot(&a.v.t());
                let d_v = a.attn.t().dot(&d_ctx);
                let mut d_scores = Array2::zeros(a.attn.dim());
                for i in 0..a.attn.nrows() {
                    let row = a.attn.row(i);
                    let drow = d_attn.row(i);
                    d_scores
                        .row_mut(i)
                        .assign(&crate::nn::ops::softmax1_backward(&row, &drow));
                }
                d_scores.mapv_inplace(|v| v * scale);
                let d_q = d_scores.dot(&a.k);
                let d_k = d_scores.t().dot(&a.q);
                let mut d_f1n = self.attn_q.backward(ps, &cache.f1n.view(), &d_q.view(), gs);
                d_f1n += &d_f2;
                let mut d_prev = self.attn_k.backward(ps, &a.prev.view(), &d_k.view(), gs);
                d_prev += &self.attn_v.backward(ps, &a.prev.view(), &d_v.view(), gs);
                (d_f1n, Some(d_prev))
            }
            None => (d_f2, None),
        };

        let d_f1 = self.ln1.backward(ps, &cache.ln1c, &d_f1n.view(), gs);
        d_f1n.fill(F::zero());

        // time path: temb broadcast over rows
        let d_temb: Array1<F> = d_f1.sum_axis(Axis(0));
        let th = cache.time_h_pre.mapv(|v| v.max(F::zero()));
        let d_th = self.time2.backward(
            ps,
            &th.view().insert_axis(Axis(0)),
            &d_temb.view().insert_axis(Axis(0)),
            gs,
        );
        let mut d_th_pre = d_th.row(0).to_owned();
        for (g, &p) in d_th_pre.iter_mut().zip(cache.time_h_pre.iter()) {
            if p <= F::zero() {
                *g = F::zero();
            }
        }
        let _ = self.time1.backward(
            ps,
            &cache.time_emb_in.view().insert_axis(Axis(0)),
            &d_th_pre.view().insert_axis(Axis(0)),
            gs,
        );

        // RoI projection
        let d_f0 = relu2_backward(&cache.f0_pre.view(), &d_f1.view());
        let d_flat = self.roi_proj.backward(ps, &cache.flat.view(), &d_f0.view(), gs);

        // scatter RoI gradients back into the pyramid
        let mut d_pyramid: Vec<Array3<F>> = cache
            .pyramid_dims
            .iter()
            .map(|&dim| Array3::zeros(dim))
            .collect();
        for bi in 0..n {
            let d_roi = d_flat
                .row(bi)
                .to_owned()
                .into_shape_with_order((self.c_prime, ROI_SIZE, ROI_SIZE))
                .unwrap();
            if cache.step0 {
                let d_rois = aggregate_backward(
                    ps,
                    &self.dmlab,
                    &cache.rois[bi],
                    &cache.agg[bi],
                    &d_roi.view(),
                    None,
                    gs,
                );
                for (li, d_lvl_roi) in d_rois.iter().enumerate() {
                    roi_align_backward_into(
                        &d_lvl_roi.view(),
                        &mut d_pyramid[li],
                        &cache.boxes[bi],
                        FPN_STRIDES[li],
                        cache.image_size,
                    );
                }
            } else {
                let li = cache.levels[bi];
                roi_align_backward_into(
                    &d_roi.view(),
                    &mut d_pyramid[li],
                    &cache.boxes[bi],
                    FPN_STRIDES[li],
                    cache.image_size,
                );
            }
        }
        (d_pyramid, d_prev)
    }
}

/// Descriptor re-export used by monitoring dumps.
pub fn roi_descriptor<F: Scalar>(roi: &Array3<F>) -> Array1<F> {
    global_descriptor(&roi.view())
}
