//! CBAM channel/spatial attention and the dynamic channel-reduction fusion
//! block that merges concatenated RGB and X feature maps into a fixed width.
//!
//! The fusion forward pass is: concatenate, channel-attend, weight, build a
//! data-dependent reduction matrix from the channel attention vector, project
//! channels per pixel, spatial-attend, weight. Every intermediate needed by
//! the regularizers and by monitoring is returned, and the backward pass
//! covers every parameter and input path (verified against central finite
//! differences in the gradient suite).

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::conv::{Conv2d, ConvCache};
use crate::nn::ops::sigmoid_scalar;
use crate::nn::params::{GradStore, Init, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Channel attention vector, entries in (0, 1).
pub type ChannelAttention<F> = Array1<F>;
/// Spatial attention map [H, W], entries in (0, 1).
pub type SpatialAttention<F> = Array2<F>;

/// Parameters of one fusion block.
///
/// The channel MLP is shared between the average- and max-pooled paths; the
/// projection maps the C-dim attention vector to a (C'·C)-dim vector that is
/// reshaped row-major into the reduction matrix.
#[derive(Debug, Clone)]
pub struct DcrCbam {
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub spatial_conv: Conv2d,
    pub w_proj: ParamId,
    pub b_proj: ParamId,
    /// Concatenated input width C.
    pub c_in: usize,
    /// Reduced output width C'.
    pub c_out: usize,
    /// Channel-MLP reduction ratio r.
    pub reduction: usize,
    /// Spatial kernel size k (odd).
    pub kernel: usize,
}

/// Fusion outputs: the reduced map plus the intermediates consumed by the
/// training regularizers and attention-rate monitoring.
pub struct DcrCbamOutput<F> {
    pub fused: Array3<F>,
    pub m_c: ChannelAttention<F>,
    pub m_s: SpatialAttention<F>,
    pub w_red: Array2<F>,
}

pub struct ChannelAttnCache<F> {
    pooled_avg: Array1<F>,
    pooled_max: Array1<F>,
    argmax: Vec<(usize, usize)>,
    pre_h_avg: Array1<F>,
    pre_h_max: Array1<F>,
    m_c: Array1<F>,
}

pub struct SpatialAttnCache<F> {
    conv: ConvCache<F>,
    argmax_c: Array2<usize>,
    m_s: Array2<F>,
}

pub struct FuseCache<F> {
    concat: Array3<F>,
    ch: ChannelAttnCache<F>,
    f_prime: Array3<F>,
    z: Array1<F>,
    w_red: Array2<F>,
    f_red: Array3<F>,
    sp: SpatialAttnCache<F>,
    c_rgb: usize,
}

impl DcrCbam {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        reduction: usize,
        kernel: usize,
    ) -> Result<Self> {
        if c_out > c_in {
            return Err(Error::Config(format!("C' ({c_out}) must not exceed C ({c_in})")));
        }
        if c_in % reduction != 0 {
            return Err(Error::Config(format!("reduction {reduction} must divide C ({c_in})")));
        }
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("spatial kernel {kernel} must be odd")));
        }
        let hidden = c_in / reduction;
        let mlp_w1 = ps.register(
            &format!("{name}.mlp.w1"),
            &[hidden, c_in],
            Init::KaimingUniform { fan_in: c_in },
            rng,
        );
        let mlp_b1 = ps.register(&format!("{name}.mlp.b1"), &[hidden], Init::Zeros, rng);
        let mlp_w2 = ps.register(
            &format!("{name}.mlp.w2"),
            &[c_in, hidden],
            Init::KaimingUniform { fan_in: hidden },
            rng,
        );
        let mlp_b2 = ps.register(&format!("{name}.mlp.b2"), &[c_in], Init::Zeros, rng);
        let spatial_conv = Conv2d::new(
            ps,
            rng,
            &format!("{name}.spatial"),
            2,
            1,
            kernel,
            1,
            (kernel - 1) / 2,
            true,
        );
        // Small-noise init keeps the initial reduction matrix near uniform 0.5.
        let w_proj = ps.register(
            &format!("{name}.proj.w"),
            &[c_out * c_in, c_in],
            Init::KaimingUniform { fan_in: c_in },
            rng,
        );
        let b_proj = ps.register(&format!("{name}.proj.b"), &[c_out * c_in], Init::Zeros, rng);
        Ok(Self {
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            spatial_conv,
            w_proj,
            b_proj,
            c_in,
            c_out,
            reduction,
            kernel,
        })
    }

    /// M_c = sigmoid(MLP(avgpool(f)) + MLP(maxpool(f))), pools over all H·W
    /// positions per channel, MLP shared between both paths.
    pub fn channel_attention<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        f: &ArrayView3<'_, F>,
    ) -> Result<(ChannelAttention<F>, ChannelAttnCache<F>)> {
        let (c, h, w) = f.dim();
        if c != self.c_in {
            return Err(Error::Config(format!(
                "feature map has {c} channels, block expects {}",
                self.c_in
            )));
        }
        let hw = F::from_f64((h * w) as f64);
        let mut pooled_avg = Array1::zeros(c);
        let mut pooled_max = Array1::zeros(c);
        let mut argmax = vec![(0usize, 0usize); c];
        for ci in 0..c {
            let plane = f.index_axis(Axis(0), ci);
            let mut best = F::neg_infinity();
            let mut sum = F::zero();
            for yi in 0..h {
                for xi in 0..w {
                    let v = plane[[yi, xi]];
                    sum += v;
                    if v > best {
                        best = v;
                        argmax[ci] = (yi, xi);
                    }
                }
            }
            pooled_avg[ci] = sum / hw;
            pooled_max[ci] = best;
        }
        let w1 = ps.view2(self.mlp_w1);
        let b1 = ps.view1(self.mlp_b1);
        let w2 = ps.view2(self.mlp_w2);
        let b2 = ps.view1(self.mlp_b2);
        let pre_h_avg = w1.dot(&pooled_avg) + &b1;
        let pre_h_max = w1.dot(&pooled_max) + &b1;
        let h_avg = pre_h_avg.mapv(|v| v.max(F::zero()));
        let h_max = pre_h_max.mapv(|v| v.max(F::zero()));
        let logits = w2.dot(&h_avg) + &b2 + &(w2.dot(&h_max) + &b2);
        let m_c = logits.mapv(sigmoid_scalar);
        let cache = ChannelAttnCache {
            pooled_avg,
            pooled_max,
            argmax,
            pre_h_avg,
            pre_h_max,
            m_c: m_c.clone(),
        };
        Ok((m_c, cache))
    }

    fn channel_attention_backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &ChannelAttnCache<F>,
        d_m_c: &ArrayView1<'_, F>,
        f_dim: (usize, usize, usize),
        gs: &mut GradStore<F>,
    ) -> Array3<F> {
        let (c, h, w) = f_dim;
        let hw = F::from_f64((h * w) as f64);
        let d_logits: Array1<F> = d_m_c
            .iter()
            .zip(cache.m_c.iter())
            .map(|(&d, &m)| d * m * (F::one() - m))
            .collect();

        let w1 = ps.view2(self.mlp_w1);
        let w2 = ps.view2(self.mlp_w2);
        let mut df = Array3::zeros((c, h, w));
        // b2 enters both paths, so its gradient is 2x the logit gradient.
        let db2 = d_logits.mapv(|v| v + v);
        gs.add(ps, self.mlp_b2, db2.as_slice().unwrap());

        for (pre_h, pooled, is_max) in [
            (&cache.pre_h_avg, &cache.pooled_avg, false),
            (&cache.pre_h_max, &cache.pooled_max, true),
        ] {
            let hidden = pre_h.mapv(|v| v.max(F::zero()));
            gs.add_outer(ps, self.mlp_w2, &d_logits.view(), &hidden.view());
            let mut dh = w2.t().dot(&d_logits);
            for (g, &p) in dh.iter_mut().zip(pre_h.iter()) {
                if p <= F::zero() {
                    *g = F::zero();
                }
            }
            gs.add_outer(ps, self.mlp_w1, &dh.view(), &pooled.view());
            gs.add(ps, self.mlp_b1, dh.as_slice().unwrap());
            let dpooled = w1.t().dot(&dh);
            if is_max {
                for ci in 0..c {
                    let (yi, xi) = cache.argmax[ci];
                    df[[ci, yi, xi]] += dpooled[ci];
                }
            } else {
                for ci in 0..c {
                    let g = dpooled[ci] / hw;
                    for yi in 0..h {
                        for xi in 0..w {
                            df[[ci, yi, xi]] += g;
                        }
                    }
                }
            }
        }
        df
    }

    /// M_s = sigmoid(conv_k([mean_c(f); max_c(f)])), zero padding (k-1)/2.
    pub fn spatial_attention<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        f: &ArrayView3<'_, F>,
    ) -> (SpatialAttention<F>, SpatialAttnCache<F>) {
        let (c, h, w) = f.dim();
        let cn = F::from_f64(c as f64);
        let mut stacked = Array3::zeros((2, h, w));
        let mut argmax_c = Array2::zeros((h, w));
        for yi in 0..h {
            for xi in 0..w {
                let mut sum = F::zero();
                let mut best = F::neg_infinity();
                let mut best_c = 0usize;
                for ci in 0..c {
                    let v = f[[ci, yi, xi]];
                    sum += v;
                    if v > best {
                        best = v;
                        best_c = ci;
                    }
                }
                stacked[[0, yi, xi]] = sum / cn;
                stacked[[1, yi, xi]] = best;
                argmax_c[[yi, xi]] = best_c;
            }
        }
        let (pre, conv) = self.spatial_conv.forward(ps, &stacked.view());
        let m_s = pre.index_axis(Axis(0), 0).mapv(sigmoid_scalar);
        let cache = SpatialAttnCache { conv, argmax_c, m_s: m_s.clone() };
        (m_s, cache)
    }

    fn spatial_attention_backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &SpatialAttnCache<F>,
        d_m_s: &Array2<F>,
        f_dim: (usize, usize, usize),
        gs: &mut GradStore<F>,
    ) -> Array3<F> {
        let (c, h, w) = f_dim;
        let cn = F::from_f64(c as f64);
        let mut d_pre = Array3::zeros((1, h, w));
        for yi in 0..h {
            for xi in 0..w {
                let m = cache.m_s[[yi, xi]];
                d_pre[[0, yi, xi]] = d_m_s[[yi, xi]] * m * (F::one() - m);
            }
        }
        let d_stacked = self.spatial_conv.backward(ps, &cache.conv, &d_pre.view(), gs);
        let mut df = Array3::zeros((c, h, w));
        for yi in 0..h {
            for xi in 0..w {
                let dmean = d_stacked[[0, yi, xi]] / cn;
                for ci in 0..c {
                    df[[ci, yi, xi]] += dmean;
                }
                df[[cache.argmax_c[[yi, xi]], yi, xi]] += d_stacked[[1, yi, xi]];
            }
        }
        df
    }

    /// Z = sigmoid(W_proj · m_c + b_proj), reshaped row-major into [C', C]:
    /// W_red[i][j] = Z[i·C + j].
    pub fn build_reduction_matrix<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        m_c: &ArrayView1<'_, F>,
    ) -> Result<(Array2<F>, Array1<F>)> {
        if m_c.len() != self.c_in {
            return Err(Error::Config(format!(
                "attention vector has length {}, block expects {}",
                m_c.len(),
                self.c_in
            )));
        }
        let wp = ps.view2(self.w_proj);
        let bp = ps.view1(self.b_proj);
        let z = (wp.dot(m_c) + &bp).mapv(sigmoid_scalar);
        let w_red = Array2::from_shape_vec((self.c_out, self.c_in), z.to_vec()).unwrap();
        Ok((w_red, z))
    }

    /// Dynamic 1x1 projection: out[c', p] = sum_c W_red[c', c] · f[c, p].
    pub fn project_channels<F: Scalar>(w_red: &Array2<F>, f: &ArrayView3<'_, F>) -> Array3<F> {
        let (c, h, w) = f.dim();
        let f2 = f.to_shape((c, h * w)).unwrap();
        w_red
            .dot(&f2)
            .into_shape_with_order((w_red.nrows(), h, w))
            .unwrap()
    }

    /// Full fusion pass; RGB channels come first in the concatenation.
    pub fn fuse<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        f_rgb: &ArrayView3<'_, F>,
        f_x: &ArrayView3<'_, F>,
    ) -> Result<(DcrCbamOutput<F>, FuseCache<F>)> {
        let (c_rgb, h, w) = f_rgb.dim();
        let (c_x, hx, wx) = f_x.dim();
        if (h, w) != (hx, wx) {
            return Err(Error::InvalidInput(format!(
                "spatial shapes differ: rgb {h}x{w} vs x {hx}x{wx}"
            )));
        }
        if c_rgb + c_x != self.c_in {
            return Err(Error::Config(format!(
                "concat width {} does not match block C = {}",
                c_rgb + c_x,
                self.c_in
            )));
        }
        let mut concat = Array3::zeros((self.c_in, h, w));
        concat.slice_mut(ndarray::s![..c_rgb, .., ..]).assign(f_rgb);
        concat.slice_mut(ndarray::s![c_rgb.., .., ..]).assign(f_x);

        let (m_c, ch_cache) = self.channel_attention(ps, &concat.view())?;
        let mut f_prime = concat.clone();
        for (ci, &a) in m_c.iter().enumerate() {
            f_prime.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v * a);
        }
        let (w_red, z) = self.build_reduction_matrix(ps, &m_c.view())?;
        let f_red = Self::project_channels(&w_red, &f_prime.view());
        let (m_s, sp_cache) = self.spatial_attention(ps, &f_red.view());
        let mut fused = f_red.clone();
        for ci in 0..self.c_out {
            let mut plane = fused.index_axis_mut(Axis(0), ci);
            for yi in 0..h {
                for xi in 0..w {
                    plane[[yi, xi]] = plane[[yi, xi]] * m_s[[yi, xi]];
                }
            }
        }
        let out = DcrCbamOutput { fused, m_c: m_c.clone(), m_s: m_s.clone(), w_red: w_red.clone() };
        let cache = FuseCache { concat, ch: ch_cache, f_prime, z, w_red, f_red, sp: sp_cache, c_rgb };
        Ok((out, cache))
    }

    /// Backward through the full fusion.
    ///
    /// `d_m_c` / `d_m_s` carry extra gradients injected by the attention
    /// regularizers. Returns (d f_rgb, d f_x).
    pub fn fuse_backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &FuseCache<F>,
        d_fused: &ArrayView3<'_, F>,
        d_m_c_extra: Option<&Array1<F>>,
        d_m_s_extra: Option<&Array2<F>>,
        gs: &mut GradStore<F>,
    ) -> (Array3<F>, Array3<F>) {
        let (c_out, h, w) = cache.f_red.dim();
        let c_in = self.c_in;

        // out = m_s ⊙ f_red
        let mut d_m_s = match d_m_s_extra {
            Some(g) => g.clone(),
            None => Array2::zeros((h, w)),
        };
        let mut d_f_red = Array3::zeros((c_out, h, w));
        for ci in 0..c_out {
            for yi in 0..h {
                for xi in 0..w {
                    let d = d_fused[[ci, yi, xi]];
                    d_m_s[[yi, xi]] += d * cache.f_red[[ci, yi, xi]];
                    d_f_red[[ci, yi, xi]] = d * cache.sp.m_s[[yi, xi]];
                }
            }
        }
        d_f_red += &self.spatial_attention_backward(ps, &cache.sp, &d_m_s, (c_out, h, w), gs);

        // f_red = w_red · f_prime (per pixel)
        let d_f_red2 = d_f_red.to_shape((c_out, h * w)).unwrap();
        let f_prime2 = cache.f_prime.to_shape((c_in, h * w)).unwrap();
        let d_w_red = d_f_red2.dot(&f_prime2.t());
        let d_f_prime2 = cache.w_red.t().dot(&d_f_red2);
        let mut d_f_prime = d_f_prime2.into_shape_with_order((c_in, h, w)).unwrap();

        // w_red = reshape(sigmoid(w_proj · m_c + b_proj))
        let d_z: Array1<F> = d_w_red
            .iter()
            .zip(cache.z.iter())
            .map(|(&d, &z)| d * z * (F::one() - z))
            .collect();
        let wp = ps.view2(self.w_proj);
        gs.add_outer(ps, self.w_proj, &d_z.view(), &cache.ch.m_c.view());
        gs.add(ps, self.b_proj, d_z.as_slice().unwrap());
        let mut d_m_c = crate::nn::ops::matvec_transposed(&wp, &d_z.view());

        // f_prime = m_c ⊙ concat
        let mut d_concat = Array3::zeros((c_in, h, w));
        for ci in 0..c_in {
            let a = cache.ch.m_c[ci];
            let mut acc = F::zero();
            for yi in 0..h {
                for xi in 0..w {
                    let d = d_f_prime[[ci, yi, xi]];
                    acc += d * cache.concat[[ci, yi, xi]];
                    d_concat[[ci, yi, xi]] = d * a;
                }
            }
            d_m_c[ci] += acc;
        }
        if let Some(extra) = d_m_c_extra {
            d_m_c += extra;
        }
        d_concat += &self.channel_attention_backward(ps, &cache.ch, &d_m_c.view(), (c_in, h, w), gs);

        // zero out the borrow of d_f_prime now that it has been consumed
        d_f_prime.fill(F::zero());

        let d_rgb = d_concat.slice(ndarray::s![..cache.c_rgb, .., ..]).to_owned();
        let d_x = d_concat.slice(ndarray::s![cache.c_rgb.., .., ..]).to_owned();
        (d_rgb, d_x)
    }
}

/// Mean attention per modality block, normalized to sum to one.
///
/// `c_rgb` is the number of leading channels belonging to the RGB branch.
pub fn modality_attention_rate<F: Scalar>(m_c: &ArrayView1<'_, F>, c_rgb: usize) -> (f64, f64) {
    assert!(c_rgb > 0 && c_rgb < m_c.len(), "c_rgb must split the vector");
    let s_rgb: f64 =
        m_c.iter().take(c_rgb).map(|v| v.into_f64()).sum::<f64>() / c_rgb as f64;
    let s_x: f64 = m_c.iter().skip(c_rgb).map(|v| v.into_f64()).sum::<f64>()
        / (m_c.len() - c_rgb) as f64;
    let total = s_rgb + s_x;
    (s_rgb / total, s_x / total)
}
