//! Residual CNN backbone and feature pyramid.
//!
//! Desk-scale 18-layer-class layout: stride-2 stem, four stages of basic
//! blocks (stride 2 each) producing C2..C5 at strides 4/8/16/32, then
//! lateral 1x1 projections with nearest-neighbour top-down merging.

use ndarray::{Array3, ArrayView3};
use rand::Rng;

use crate::nn::conv::{Conv2d, ConvCache};
use crate::nn::norm::{GroupNorm, GroupNormCache};
use crate::nn::ops::{relu3, relu3_backward, upsample2x, upsample2x_backward};
use crate::nn::params::{GradStore, ParamStore};
use crate::scalar::Scalar;

use super::config::NUM_LEVELS;

fn gn_groups(channels: usize) -> usize {
    8.min(channels)
}

struct BasicBlock {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    down: Option<(Conv2d, GroupNorm)>,
}

struct BlockCache<F> {
    c1: ConvCache<F>,
    g1: GroupNormCache<F>,
    y1: Array3<F>,
    c2: ConvCache<F>,
    g2: GroupNormCache<F>,
    down: Option<(ConvCache<F>, GroupNormCache<F>)>,
    pre_out: Array3<F>,
}

impl BasicBlock {
    fn new<F: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new(ps, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, false);
        let gn1 = GroupNorm::new(ps, rng, &format!("{name}.gn1"), out_ch, gn_groups(out_ch));
        let conv2 = Conv2d::new(ps, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false);
        let gn2 = GroupNorm::new(ps, rng, &format!("{name}.gn2"), out_ch, gn_groups(out_ch));
        let down = (in_ch != out_ch || stride != 1).then(|| {
            (
                Conv2d::new(ps, rng, &format!("{name}.down.conv"), in_ch, out_ch, 1, stride, 0, false),
                GroupNorm::new(ps, rng, &format!("{name}.down.gn"), out_ch, gn_groups(out_ch)),
            )
        });
        Self { conv1, gn1, conv2, gn2, down }
    }

    fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &ArrayView3<'_, F>,
    ) -> (Array3<F>, BlockCache<F>) {
        let (h1, c1) = self.conv1.forward(ps, x);
        let (y1, g1) = self.gn1.forward(ps, &h1.view());
        let a1 = relu3(&y1.view());
        let (h2, c2) = self.conv2.forward(ps, &a1.view());
        let (y2, g2) = self.gn2.forward(ps, &h2.view());
        let (skip, down) = match &self.down {
            Some((conv, gn)) => {
                let (s, dc) = conv.forward(ps, x);
                let (s, dg) = gn.forward(ps, &s.view());
                (s, Some((dc, dg)))
            }
            None => (x.to_owned(), None),
        };
        let pre_out = &y2 + &skip;
        let out = relu3(&pre_out.view());
        (out, BlockCache { c1, g1, y1, c2, g2, down, pre_out })
    }

    fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &BlockCache<F>,
        d_out: &ArrayView3<'_, F>,
        gs: &mut GradStore<F>,
    ) -> Array3<F> {
        let d_pre = relu3_backward(&cache.pre_out.view(), d_out);
        let d_h2 = self.gn2.backward(ps, &cache.g2, &d_pre.view(), gs);
        let d_a1 = self.conv2.backward(ps, &cache.c2, &d_h2.view(), gs);
        let d_y1 = relu3_backward(&cache.y1.view(), &d_a1.view());
        let d_h1 = self.gn1.backward(ps, &cache.g1, &d_y1.view(), gs);
        let mut dx = self.conv1.backward(ps, &cache.c1, &d_h1.view(), gs);
        match (&self.down, &cache.down) {
            (Some((conv, gn)), Some((dc, dg))) => {
                let d_s = gn.backward(ps, dg, &d_pre.view(), gs);
                dx += &conv.backward(ps, dc, &d_s.view(), gs);
            }
            _ => dx += &d_pre,
        }
        dx
    }
}

pub struct Backbone {
    stem: Conv2d,
    stem_gn: GroupNorm,
    stages: Vec<Vec<BasicBlock>>,
}

pub struct BackboneCache<F> {
    stem_c: ConvCache<F>,
    stem_g: GroupNormCache<F>,
    stem_pre: Array3<F>,
    blocks: Vec<Vec<BlockCache<F>>>,
}

impl Backbone {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        stage_widths: [usize; 4],
        blocks_per_stage: usize,
    ) -> Self {
        let stem_w = stage_widths[0];
        let stem = Conv2d::new(ps, rng, &format!("{name}.stem"), in_ch, stem_w, 3, 2, 1, false);
        let stem_gn = GroupNorm::new(ps, rng, &format!("{name}.stem_gn"), stem_w, gn_groups(stem_w));
        let mut stages = Vec::with_capacity(4);
        let mut prev = stem_w;
        for (si, &width) in stage_widths.iter().enumerate() {
            let mut blocks = Vec::with_capacity(blocks_per_stage);
            for bi in 0..blocks_per_stage {
                let stride = if bi == 0 { 2 } else { 1 };
                let in_ch = if bi == 0 { prev } else { width };
                blocks.push(BasicBlock::new(
                    ps,
                    rng,
                    &format!("{name}.s{si}.b{bi}"),
                    in_ch,
                    width,
                    stride,
                ));
            }
            stages.push(blocks);
            prev = width;
        }
        Self { stem, stem_gn, stages }
    }

    /// Returns C2..C5 feature maps.
    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &ArrayView3<'_, F>,
    ) -> (Vec<Array3<F>>, BackboneCache<F>) {
        let (h, stem_c) = self.stem.forward(ps, x);
        let (stem_pre, stem_g) = self.stem_gn.forward(ps, &h.view());
        let mut cur = relu3(&stem_pre.view());
        let mut features = Vec::with_capacity(NUM_LEVELS);
        let mut blocks = Vec::with_capacity(NUM_LEVELS);
        for stage in &self.stages {
            let mut stage_caches = Vec::with_capacity(stage.len());
            for block in stage {
                let (next, cache) = block.forward(ps, &cur.view());
                cur = next;
                stage_caches.push(cache);
            }
            features.push(cur.clone());
            blocks.push(stage_caches);
        }
        (features, BackboneCache { stem_c, stem_g, stem_pre, blocks })
    }

    /// Propagate per-stage gradients; the input image gradient is discarded.
    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &BackboneCache<F>,
        d_features: &[Array3<F>],
        gs: &mut GradStore<F>,
    ) {
        assert_eq!(d_features.len(), self.stages.len());
        let mut d_cur: Option<Array3<F>> = None;
        for (si, stage) in self.stages.iter().enumerate().rev() {
            let mut d_stage = match d_cur.take() {
                Some(d) => &d + &d_features[si],
                None => d_features[si].clone(),
            };
            for (block, bcache) in stage.iter().zip(&cache.blocks[si]).rev() {
                d_stage = block.backward(ps, bcache, &d_stage.view(), gs);
            }
            d_cur = Some(d_stage);
        }
        let d_stem_out = d_cur.expect("at least one stage");
        let d_stem_pre = relu3_backward(&cache.stem_pre.view(), &d_stem_out.view());
        let d_h = self.stem_gn.backward(ps, &cache.stem_g, &d_stem_pre.view(), gs);
        let _ = self.stem.backward(ps, &cache.stem_c, &d_h.view(), gs);
    }
}

/// Lateral 1x1 projections with top-down nearest-neighbour merging.
pub struct Fpn {
    laterals: Vec<Conv2d>,
}

pub struct FpnCache<F> {
    lat: Vec<ConvCache<F>>,
}

impl Fpn {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        stage_widths: [usize; 4],
        out_width: usize,
    ) -> Self {
        let laterals = stage_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                Conv2d::new(ps, rng, &format!("{name}.lat{i}"), w, out_width, 1, 1, 0, true)
            })
            .collect();
        Self { laterals }
    }

    /// C2..C5 in, P2..P5 out.
    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        features: &[Array3<F>],
    ) -> (Vec<Array3<F>>, FpnCache<F>) {
        let mut lat_maps = Vec::with_capacity(NUM_LEVELS);
        let mut lat_caches = Vec::with_capacity(NUM_LEVELS);
        for (conv, f) in self.laterals.iter().zip(features) {
            let (m, c) = conv.forward(ps, &f.view());
            lat_maps.push(m);
            lat_caches.push(c);
        }
        let mut pyramid = vec![Array3::zeros((0, 0, 0)); NUM_LEVELS];
        pyramid[NUM_LEVELS - 1] = lat_maps.pop().unwrap();
        for i in (0..NUM_LEVELS - 1).rev() {
            let up = upsample2x(&pyramid[i + 1].view());
            pyramid[i] = lat_maps.pop().unwrap() + &up;
        }
        (pyramid, FpnCache { lat: lat_caches })
    }

    /// Returns gradients for the backbone stage features.
    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &FpnCache<F>,
        d_pyramid: &[Array3<F>],
        gs: &mut GradStore<F>,
    ) -> Vec<Array3<F>> {
        let mut d_lat: Vec<Array3<F>> = d_pyramid.to_vec();
        for i in 0..NUM_LEVELS - 1 {
            let up_grad = upsample2x_backward(&d_lat[i].view());
            d_lat[i + 1] += &up_grad;
        }
        self.laterals
            .iter()
            .zip(&cache.lat)
            .zip(&d_lat)
            .map(|((conv, c), d)| conv.backward(ps, c, &d.view(), gs))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{fd_grad_params_at, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backbone_fpn_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut ps, &mut rng, "bb", 3, [8, 16, 24, 32], 1);
        let fpn = Fpn::new(&mut ps, &mut rng, "fpn", [8, 16, 24, 32], 16);
        let x = Array3::<f32>::from_elem((3, 64, 64), 0.1);
        let (feats, _) = bb.forward(&ps, &x.view());
        assert_eq!(feats[0].dim(), (8, 16, 16));
        assert_eq!(feats[3].dim(), (32, 2, 2));
        let (pyr, _) = fpn.forward(&ps, &feats);
        for (i, stride) in [4usize, 8, 16, 32].iter().enumerate() {
            assert_eq!(pyr[i].dim(), (16, 64 / stride, 64 / stride));
            assert!(pyr[i].iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn backbone_fpn_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut ps, &mut rng, "bb", 2, [8, 8, 8, 8], 1);
        let fpn = Fpn::new(&mut ps, &mut rng, "fpn", [8, 8, 8, 8], 8);
        // jitter affine/bias parameters off their init so no pre-activation
        // sits exactly on the ReLU kink (where finite differences are
        // one-sided by construction)
        for (i, v) in ps.values_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i as f64) * 0.61).sin();
        }
        let x = Array3::from_shape_fn((2, 64, 64), |(c, y, xi)| {
            ((c * 31 + y * 7 + xi) as f64 * 0.37).sin() * 0.5
        });

        let loss = |ps: &ParamStore<f64>| {
            let (feats, _) = bb.forward(ps, &x.view());
            let (pyr, _) = fpn.forward(ps, &feats);
            pyr.iter()
                .map(|p| p.iter().enumerate().map(|(i, v)| v * v * (1.0 + (i % 7) as f64 * 0.1)).sum::<f64>())
                .sum::<f64>()
        };

        let (feats, bcache) = bb.forward(&ps, &x.view());
        let (pyr, fcache) = fpn.forward(&ps, &feats);
        let d_pyr: Vec<Array3<f64>> = pyr
            .iter()
            .map(|p| {
                let mut d = p.clone();
                for (i, v) in d.iter_mut().enumerate() {
                    *v = 2.0 * *v * (1.0 + (i % 7) as f64 * 0.1);
                }
                d
            })
            .collect();
        let mut gs = GradStore::zeros_for(&ps);
        let d_feats = fpn.backward(&ps, &fcache, &d_pyr, &mut gs);
        bb.backward(&ps, &bcache, &d_feats, &mut gs);

        // spot-check a subset of parameters with finite differences (the
        // full sweep is slow; sampled indices cover every layer kind)
        let stride = ps.num_values() / 250 + 1;
        let indices: Vec<usize> = (0..ps.num_values()).step_by(stride).collect();
        let fd = fd_grad_params_at(&mut ps, &indices, |p| loss(p), 1e-5);
        let sampled_analytic: Vec<f64> =
            indices.iter().map(|&i| gs.data()[i]).collect();
        let err = max_rel_err(&sampled_analytic, &fd);
        assert!(err < 1e-4, "backbone+fpn gradient error {err}");
    }
}
