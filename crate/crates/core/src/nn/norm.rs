//! Group and layer normalization with hand-derived backward passes.
//!
//! GroupNorm is used throughout the backbones (batch-independent, so batch
//! items can be processed in parallel without coupling); LayerNorm is used on
//! per-proposal feature vectors in the decoder head.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;

use crate::nn::params::{GradStore, Init, ParamId, ParamStore};
use crate::scalar::Scalar;

const EPS: f64 = 1e-5;

/// GroupNorm over a [C, H, W] map: statistics per channel group, affine per channel.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
}

pub struct GroupNormCache<F> {
    xhat: Array3<F>,
    inv_std: Vec<F>,
}

impl GroupNorm {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        assert!(channels % groups == 0, "channels must divide into groups");
        let gamma = ps.register(&format!("{name}.gamma"), &[channels], Init::Constant(1.0), rng);
        let beta = ps.register(&format!("{name}.beta"), &[channels], Init::Zeros, rng);
        Self { gamma, beta, groups, channels }
    }

    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &ArrayView3<'_, F>,
    ) -> (Array3<F>, GroupNormCache<F>) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let cg = c / self.groups;
        let plane = h * w;
        let n = F::from_f64((cg * plane) as f64);
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut y = Array3::zeros((c, h, w));
        let mut xhat = Array3::zeros((c, h, w));
        let ys = y.as_slice_mut().unwrap();
        let xh = xhat.as_slice_mut().unwrap();
        let mut inv_std = vec![F::zero(); self.groups];
        let gamma = ps.view1(self.gamma);
        let beta = ps.view1(self.beta);
        for g in 0..self.groups {
            let span = &xs[g * cg * plane..(g + 1) * cg * plane];
            let mean = span.iter().copied().sum::<F>() / n;
            let var = span.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let istd = F::one() / (var + F::from_f64(EPS)).sqrt();
            inv_std[g] = istd;
            for ci in g * cg..(g + 1) * cg {
                let (ga, be) = (gamma[ci], beta[ci]);
                let src = &xs[ci * plane..(ci + 1) * plane];
                let xh_row = &mut xh[ci * plane..(ci + 1) * plane];
                let y_row = &mut ys[ci * plane..(ci + 1) * plane];
                for i in 0..plane {
                    let v = (src[i] - mean) * istd;
                    xh_row[i] = v;
                    y_row[i] = ga * v + be;
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &GroupNormCache<F>,
        dy: &ArrayView3<'_, F>,
        gs: &mut GradStore<F>,
    ) -> Array3<F> {
        let (c, h, w) = dy.dim();
        let cg = c / self.groups;
        let plane = h * w;
        let n = F::from_f64((cg * plane) as f64);
        let gamma = ps.view1(self.gamma);
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().unwrap();
        let xhs = cache.xhat.as_slice().unwrap();

        let mut dgamma = Array1::<F>::zeros(c);
        let mut dbeta = Array1::<F>::zeros(c);
        for ci in 0..c {
            let dyr = &dys[ci * plane..(ci + 1) * plane];
            let xhr = &xhs[ci * plane..(ci + 1) * plane];
            let mut dg = F::zero();
            let mut db = F::zero();
            for i in 0..plane {
                dg += dyr[i] * xhr[i];
                db += dyr[i];
            }
            dgamma[ci] = dg;
            dbeta[ci] = db;
        }
        gs.add(ps, self.gamma, dgamma.as_slice().unwrap());
        gs.add(ps, self.beta, dbeta.as_slice().unwrap());

        let mut dx = Array3::zeros((c, h, w));
        let dxs = dx.as_slice_mut().unwrap();
        for g in 0..self.groups {
            // dxhat = dy * gamma; dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for ci in g * cg..(g + 1) * cg {
                let ga = gamma[ci];
                let dyr = &dys[ci * plane..(ci + 1) * plane];
                let xhr = &xhs[ci * plane..(ci + 1) * plane];
                for i in 0..plane {
                    let dxh = dyr[i] * ga;
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xhr[i];
                }
            }
            let m1 = sum_dxhat / n;
            let m2 = sum_dxhat_xhat / n;
            let istd = cache.inv_std[g];
            for ci in g * cg..(g + 1) * cg {
                let ga = gamma[ci];
                let dyr = &dys[ci * plane..(ci + 1) * plane];
                let xhr = &xhs[ci * plane..(ci + 1) * plane];
                let dxr = &mut dxs[ci * plane..(ci + 1) * plane];
                for i in 0..plane {
                    let dxh = dyr[i] * ga;
                    dxr[i] = istd * (dxh - m1 - xhr[i] * m2);
                }
            }
        }
        dx
    }
}

/// LayerNorm over the last axis of a [n, d] batch.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Vec<F>,
}

impl LayerNorm {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
    ) -> Self {
        let gamma = ps.register(&format!("{name}.gamma"), &[dim], Init::Constant(1.0), rng);
        let beta = ps.register(&format!("{name}.beta"), &[dim], Init::Zeros, rng);
        Self { gamma, beta, dim }
    }

    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &ArrayView2<'_, F>,
    ) -> (Array2<F>, LayerNormCache<F>) {
        let (n, d) = x.dim();
        debug_assert_eq!(d, self.dim);
        let nd = F::from_f64(d as f64);
        let gamma = ps.view1(self.gamma);
        let beta = ps.view1(self.beta);
        let mut y = Array2::zeros((n, d));
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = vec![F::zero(); n];
        for i in 0..n {
            let row = x.row(i);
            let mean = row.sum() / nd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nd;
            let istd = F::one() / (var + F::from_f64(EPS)).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (x[[i, j]] - mean) * istd;
                xhat[[i, j]] = xh;
                y[[i, j]] = gamma[j] * xh + beta[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &LayerNormCache<F>,
        dy: &ArrayView2<'_, F>,
        gs: &mut GradStore<F>,
    ) -> Array2<F> {
        let (n, d) = dy.dim();
        let nd = F::from_f64(d as f64);
        let gamma = ps.view1(self.gamma);
        let mut dgamma = Array1::<F>::zeros(d);
        let mut dbeta = Array1::<F>::zeros(d);
        let mut dx = Array2::zeros((n, d));
        for i in 0..n {
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for j in 0..d {
                dgamma[j] += dy[[i, j]] * cache.xhat[[i, j]];
                dbeta[j] += dy[[i, j]];
                let dxh = dy[[i, j]] * gamma[j];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * cache.xhat[[i, j]];
            }
            let m1 = sum_dxhat / nd;
            let m2 = sum_dxhat_xhat / nd;
            for j in 0..d {
                let dxh = dy[[i, j]] * gamma[j];
                dx[[i, j]] = cache.inv_std[i] * (dxh - m1 - cache.xhat[[i, j]] * m2);
            }
        }
        gs.add(ps, self.gamma, dgamma.as_slice().unwrap());
        gs.add(ps, self.beta, dbeta.as_slice().unwrap());
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{fd_grad_array3, fd_grad_params, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn groupnorm_zero_mean_unit_var_per_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps: ParamStore<f64> = ParamStore::new();
        let gn = GroupNorm::new(&mut ps, &mut rng, "gn", 4, 2);
        let x = Array3::from_shape_fn((4, 3, 3), |(c, y, xi)| (c * 9 + y * 3 + xi) as f64 * 0.3);
        let (y, _) = gn.forward(&ps, &x.view());
        let g0 = y.slice(ndarray::s![0..2, .., ..]);
        let mean = g0.sum() / 18.0;
        assert!(mean.abs() < 1e-10);
        let var = g0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn groupnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps: ParamStore<f64> = ParamStore::new();
        let gn = GroupNorm::new(&mut ps, &mut rng, "gn", 4, 2);
        // move gamma/beta off their init so gradients are generic
        for (i, v) in ps.values_mut().iter_mut().enumerate() {
            *v += 0.1 * ((i as f64) * 0.7).sin();
        }
        let x = Array3::from_shape_fn((4, 3, 2), |(c, y, xi)| ((c * 5 + y * 2 + xi) as f64).sin());

        let loss = |ps: &ParamStore<f64>, x: &ArrayView3<'_, f64>| {
            let (y, _) = gn.forward(ps, x);
            y.iter().enumerate().map(|(i, v)| v * v * (1.0 + 0.01 * i as f64)).sum::<f64>()
        };
        let (y, cache) = gn.forward(&ps, &x.view());
        let dy = Array3::from_shape_fn(y.dim(), |idx| {
            let i = y.dim().1 * y.dim().2 * idx.0 + y.dim().2 * idx.1 + idx.2;
            2.0 * y[idx] * (1.0 + 0.01 * i as f64)
        });
        let mut gs = GradStore::zeros_for(&ps);
        let dx = gn.backward(&ps, &cache, &dy.view(), &mut gs);

        let fd_p = fd_grad_params(&mut ps, |p| loss(p, &x.view()), 1e-5);
        assert!(max_rel_err(gs.data(), &fd_p) < 1e-6);
        let fd_x = fd_grad_array3(&x, |xv| loss(&ps, xv), 1e-5);
        assert!(max_rel_err(dx.as_slice().unwrap(), fd_x.as_slice().unwrap()) < 1e-6);
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps: ParamStore<f64> = ParamStore::new();
        let ln = LayerNorm::new(&mut ps, &mut rng, "ln", 6);
        for (i, v) in ps.values_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i as f64) * 1.3).cos();
        }
        let x = Array2::from_shape_fn((3, 6), |(i, j)| ((i * 6 + j) as f64 * 0.37).sin());
        let loss = |ps: &ParamStore<f64>, x: &ArrayView2<'_, f64>| {
            let (y, _) = ln.forward(ps, x);
            y.iter().map(|v| v * v * v).sum::<f64>()
        };
        let (y, cache) = ln.forward(&ps, &x.view());
        let dy = y.mapv(|v| 3.0 * v * v);
        let mut gs = GradStore::zeros_for(&ps);
        let dx = ln.backward(&ps, &cache, &dy.view(), &mut gs);

        let fd_p = fd_grad_params(&mut ps, |p| loss(p, &x.view()), 1e-5);
        assert!(max_rel_err(gs.data(), &fd_p) < 1e-5);

        // finite differences over the input matrix
        let mut xm = x.clone();
        let mut fd_x = Array2::zeros(x.dim());
        for idx in ndarray::indices(x.dim()) {
            let orig = xm[idx];
            xm[idx] = orig + 1e-5;
            let fp = loss(&ps, &xm.view());
            xm[idx] = orig - 1e-5;
            let fm = loss(&ps, &xm.view());
            xm[idx] = orig;
            fd_x[idx] = (fp - fm) / 2e-5;
        }
        assert!(max_rel_err(dx.as_slice().unwrap(), fd_x.as_slice().unwrap()) < 1e-5);
    }
}
