//! 2D convolution over [C, H, W] maps via im2col + GEMM.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::Rng;

use crate::nn::params::{GradStore, Init, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Conv2d with square kernel, zero padding, and optional bias.
/// Weights are stored as [out_ch, in_ch * k * k].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Saved forward state needed by the backward pass.
pub struct ConvCache<F> {
    col: Array2<F>,
    in_dim: (usize, usize, usize),
    out_dim: (usize, usize, usize),
}

impl Conv2d {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = ps.register(
            &format!("{name}.w"),
            &[out_ch, fan_in],
            Init::KaimingUniform { fan_in },
            rng,
        );
        let b = bias.then(|| ps.register(&format!("{name}.b"), &[out_ch], Init::Zeros, rng));
        Self { w, b, in_ch, out_ch, k, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col<F: Scalar>(&self, x: &ArrayView3<'_, F>) -> Array2<F> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let k = self.k;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut col = Array2::zeros((c * k * k, oh * ow));
        let cols = col.as_slice_mut().unwrap();
        for ci in 0..c {
            let src_plane = &xs[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst_row = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src_plane[(iy as usize) * w..(iy as usize + 1) * w];
                        let dst = &mut dst_row[oy * ow..(oy + 1) * ow];
                        if self.stride == 1 {
                            // contiguous span with clipped edges
                            let shift = kj as isize - self.pad as isize;
                            let ox_lo = (-shift).max(0) as usize;
                            let ox_hi = ow.min((w as isize - shift).max(0) as usize);
                            for ox in ox_lo..ox_hi {
                                dst[ox] = src_row[(ox as isize + shift) as usize];
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<F: Scalar>(&self, dcol: &Array2<F>, in_dim: (usize, usize, usize)) -> Array3<F> {
        let (c, h, w) = in_dim;
        let (oh, ow) = self.out_hw(h, w);
        let k = self.k;
        let mut dx = Array3::zeros((c, h, w));
        let dxs = dx.as_slice_mut().unwrap();
        let dcol = dcol.as_standard_layout();
        let dcs = dcol.as_slice().unwrap();
        for ci in 0..c {
            let dst_plane = &mut dxs[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src_row = &dcs[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut dst_plane[(iy as usize) * w..(iy as usize + 1) * w];
                        let src = &src_row[oy * ow..(oy + 1) * ow];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &ArrayView3<'_, F>,
    ) -> (Array3<F>, ConvCache<F>) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let col = self.im2col(x);
        let wmat = ps.view2(self.w);
        let mut y2 = wmat.dot(&col);
        if let Some(b) = self.b {
            let b = ps.view1(b);
            for (mut row, &bv) in y2.rows_mut().into_iter().zip(b.iter()) {
                row += bv;
            }
        }
        let y = if y2.is_standard_layout() {
            y2.into_shape_with_order((self.out_ch, oh, ow)).unwrap()
        } else {
            y2.as_standard_layout()
                .into_owned()
                .into_shape_with_order((self.out_ch, oh, ow))
                .unwrap()
        };
        (y, ConvCache { col, in_dim: (c, h, w), out_dim: (self.out_ch, oh, ow) })
    }

    /// Returns dx; accumulates dW/db into `gs`.
    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &ConvCache<F>,
        dy: &ArrayView3<'_, F>,
        gs: &mut GradStore<F>,
    ) -> Array3<F> {
        let (oc, oh, ow) = cache.out_dim;
        debug_assert_eq!(dy.dim(), (oc, oh, ow));
        let dy2 = dy.to_shape((oc, oh * ow)).unwrap();
        let dw = dy2.dot(&cache.col.t());
        gs.add2(ps, self.w, &dw.view());
        if let Some(b) = self.b {
            let db: Array1<F> = dy2.sum_axis(ndarray::Axis(1));
            gs.add(ps, b, db.as_slice().unwrap());
        }
        let wmat = ps.view2(self.w);
        let dcol = wmat.t().dot(&dy2);
        self.col2im(&dcol, cache.in_dim)
    }
}
