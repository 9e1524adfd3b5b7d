//! Dual-modality encoder: independent backbones and pyramids per modality,
//! fused per level by a DCR-CBAM block. The RGB-only configuration uses a
//! single backbone whose pyramid width already equals the decoder width, so
//! both modes hand the decoder identically shaped inputs.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::Rng;

use crate::attention::{DcrCbam, FuseCache};
use crate::error::{Error, Result};
use crate::nn::params::{GradStore, ParamStore};
use crate::scalar::Scalar;

use super::backbone::{Backbone, BackboneCache, Fpn, FpnCache};
use super::config::{EncoderMode, ModelConfig, NUM_LEVELS};

pub struct Encoder {
    pub mode: EncoderMode,
    rgb_backbone: Backbone,
    rgb_fpn: Fpn,
    x_backbone: Option<Backbone>,
    x_fpn: Option<Fpn>,
    pub fusers: Vec<DcrCbam>,
}

pub struct EncoderOutput<F> {
    /// Fused (or RGB-only) pyramid, P2..P5, each [C', H_k, W_k].
    pub pyramid: Vec<Array3<F>>,
    /// Per-level channel and spatial attention (fused mode only).
    pub attn: Vec<(Array1<F>, Array2<F>)>,
}

pub struct EncoderCache<F> {
    rgb_bb: BackboneCache<F>,
    rgb_fpn: FpnCache<F>,
    x_bb: Option<BackboneCache<F>>,
    x_fpn: Option<FpnCache<F>>,
    fuse: Vec<FuseCache<F>>,
}

/// Build the encoder described by the config (both branches' backbones are
/// identical in architecture but carry independent parameters).
pub fn build_encoder<F: Scalar, R: Rng + ?Sized>(
    ps: &mut ParamStore<F>,
    rng: &mut R,
    cfg: &ModelConfig,
) -> Result<Encoder> {
    cfg.validate()?;
    let blocks = cfg.backbone.blocks_per_stage();
    match cfg.mode {
        EncoderMode::RgbOnly => {
            let rgb_backbone = Backbone::new(ps, rng, "rgb", 3, cfg.stage_widths, blocks);
            let rgb_fpn = Fpn::new(ps, rng, "rgb_fpn", cfg.stage_widths, cfg.c_prime);
            Ok(Encoder {
                mode: cfg.mode,
                rgb_backbone,
                rgb_fpn,
                x_backbone: None,
                x_fpn: None,
                fusers: vec![],
            })
        }
        EncoderMode::Fused => {
            let rgb_backbone = Backbone::new(ps, rng, "rgb", 3, cfg.stage_widths, blocks);
            let rgb_fpn = Fpn::new(ps, rng, "rgb_fpn", cfg.stage_widths, cfg.branch_width);
            let x_backbone = Backbone::new(ps, rng, "x", 3, cfg.stage_widths, blocks);
            let x_fpn = Fpn::new(ps, rng, "x_fpn", cfg.stage_widths, cfg.branch_width);
            let fusers = (0..NUM_LEVELS)
                .map(|i| {
                    DcrCbam::new(
                        ps,
                        rng,
                        &format!("fuse{i}"),
                        cfg.concat_width(),
                        cfg.c_prime,
                        cfg.reduction,
                        cfg.spatial_kernel,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Encoder {
                mode: cfg.mode,
                rgb_backbone,
                rgb_fpn,
                x_backbone: Some(x_backbone),
                x_fpn: Some(x_fpn),
                fusers,
            })
        }
    }
}

impl Encoder {
    /// `x` is required in fused mode and ignored otherwise.
    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        rgb: &ArrayView3<'_, F>,
        x: Option<&ArrayView3<'_, F>>,
    ) -> Result<(EncoderOutput<F>, EncoderCache<F>)> {
        let (rgb_feats, rgb_bb) = self.rgb_backbone.forward(ps, rgb);
        let (rgb_pyr, rgb_fpn) = self.rgb_fpn.forward(ps, &rgb_feats);
        match self.mode {
            EncoderMode::RgbOnly => Ok((
                EncoderOutput { pyramid: rgb_pyr, attn: vec![] },
                EncoderCache { rgb_bb, rgb_fpn, x_bb: None, x_fpn: None, fuse: vec![] },
            )),
            EncoderMode::Fused => {
                let x = x.ok_or_else(|| {
                    Error::InvalidInput("fused encoder needs the auxiliary modality".into())
                })?;
                let (x_feats, x_bb) =
                    self.x_backbone.as_ref().unwrap().forward(ps, x);
                let (x_pyr, x_fpn) = self.x_fpn.as_ref().unwrap().forward(ps, &x_feats);
                let mut pyramid = Vec::with_capacity(NUM_LEVELS);
                let mut attn = Vec::with_capacity(NUM_LEVELS);
                let mut fuse = Vec::with_capacity(NUM_LEVELS);
                for (i, fuser) in self.fusers.iter().enumerate() {
                    let (out, cache) = fuser.fuse(ps, &rgb_pyr[i].view(), &x_pyr[i].view())?;
                    pyramid.push(out.fused);
                    attn.push((out.m_c, out.m_s));
                    fuse.push(cache);
                }
                Ok((
                    EncoderOutput { pyramid, attn },
                    EncoderCache { rgb_bb, rgb_fpn, x_bb: Some(x_bb), x_fpn: Some(x_fpn), fuse },
                ))
            }
        }
    }

    /// Backward through fusion, pyramids, and both backbones. The attention
    /// regularizer gradients enter through `d_m_c` / `d_m_s`.
    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &EncoderCache<F>,
        d_pyramid: &[Array3<F>],
        d_m_c: Option<&[Array1<F>]>,
        d_m_s: Option<&[Array2<F>]>,
        gs: &mut GradStore<F>,
    ) {
        match self.mode {
            EncoderMode::RgbOnly => {
                let d_feats = self.rgb_fpn.backward(ps, &cache.rgb_fpn, d_pyramid, gs);
                self.rgb_backbone.backward(ps, &cache.rgb_bb, &d_feats, gs);
            }
            EncoderMode::Fused => {
                let mut d_rgb_pyr = Vec::with_capacity(NUM_LEVELS);
                let mut d_x_pyr = Vec::with_capacity(NUM_LEVELS);
                for (i, fuser) in self.fusers.iter().enumerate() {
                    let (d_rgb, d_x) = fuser.fuse_backward(
                        ps,
                        &cache.fuse[i],
                        &d_pyramid[i].view(),
                        d_m_c.map(|g| &g[i]),
                        d_m_s.map(|g| &g[i]),
                        gs,
                    );
                    d_rgb_pyr.push(d_rgb);
                    d_x_pyr.push(d_x);
                }
                let d_rgb_feats = self.rgb_fpn.backward(ps, &cache.rgb_fpn, &d_rgb_pyr, gs);
                self.rgb_backbone.backward(ps, &cache.rgb_bb, &d_rgb_feats, gs);
                let d_x_feats = self.x_fpn.as_ref().unwrap().backward(
                    ps,
                    cache.x_fpn.as_ref().unwrap(),
                    &d_x_pyr,
                    gs,
                );
                self.x_backbone.as_ref().unwrap().backward(
                    ps,
                    cache.x_bb.as_ref().unwrap(),
                    &d_x_feats,
                    gs,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::config::{BackboneDepth, FPN_STRIDES};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(mode: EncoderMode) -> ModelConfig {
        ModelConfig {
            mode,
            backbone: BackboneDepth::Tiny,
            stage_widths: [8, 8, 16, 16],
            branch_width: 8,
            c_prime: 16,
            reduction: 4,
            spatial_kernel: 3,
            image_size: 64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn fused_and_rgb_only_pyramids_share_decoder_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps_f = ParamStore::<f32>::new();
        let fused = build_encoder(&mut ps_f, &mut rng, &tiny_cfg(EncoderMode::Fused)).unwrap();
        let mut ps_r = ParamStore::<f32>::new();
        let rgb_only =
            build_encoder(&mut ps_r, &mut rng, &tiny_cfg(EncoderMode::RgbOnly)).unwrap();

        let rgb = Array3::<f32>::from_elem((3, 64, 64), 0.2);
        let x = Array3::<f32>::from_elem((3, 64, 64), -0.1);
        let (out_f, _) = fused.forward(&ps_f, &rgb.view(), Some(&x.view())).unwrap();
        let (out_r, _) = rgb_only.forward(&ps_r, &rgb.view(), None).unwrap();
        for (i, &stride) in FPN_STRIDES.iter().enumerate() {
            let expect = (16, 64 / stride, 64 / stride);
            assert_eq!(out_f.pyramid[i].dim(), expect);
            assert_eq!(out_r.pyramid[i].dim(), expect);
            assert!(out_f.pyramid[i].iter().all(|v| v.is_finite()));
        }
        assert_eq!(out_f.attn.len(), NUM_LEVELS);
        assert!(out_r.attn.is_empty());
    }

    #[test]
    fn fused_encoder_requires_auxiliary_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f32>::new();
        let enc = build_encoder(&mut ps, &mut rng, &tiny_cfg(EncoderMode::Fused)).unwrap();
        let rgb = Array3::<f32>::zeros((3, 64, 64));
        assert!(enc.forward(&ps, &rgb.view(), None).is_err());
    }

    #[test]
    fn zero_weight_fusers_still_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::<f32>::new();
        let enc = build_encoder(&mut ps, &mut rng, &tiny_cfg(EncoderMode::Fused)).unwrap();
        ps.values_mut().fill(0.0);
        // GroupNorm gammas must stay 1 for a meaningful forward
        for spec in ps.specs().iter().map(|s| s.clone()).collect::<Vec<_>>() {
            if spec.name.ends_with(".gamma") {
                for i in spec.offset..spec.offset + spec.len {
                    ps.values_mut()[i] = 1.0;
                }
            }
        }
        let rgb = Array3::<f32>::from_elem((3, 64, 64), 0.3);
        let x = Array3::<f32>::from_elem((3, 64, 64), 0.1);
        let (out, _) = enc.forward(&ps, &rgb.view(), Some(&x.view())).unwrap();
        assert!(out.pyramid.iter().all(|p| p.iter().all(|v| v.is_finite())));
    }
}
