//! Fully connected layer over row batches.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::nn::params::{GradStore, Init, ParamId, ParamStore};
use crate::scalar::Scalar;

/// y = x · Wᵀ + b, with W stored as [out, in].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        Self::with_init(ps, rng, name, in_dim, out_dim, bias, Init::KaimingUniform { fan_in: in_dim })
    }

    pub fn with_init<F: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        w_init: Init,
    ) -> Self {
        let w = ps.register(&format!("{name}.w"), &[out_dim, in_dim], w_init, rng);
        let b = bias.then(|| ps.register(&format!("{name}.b"), &[out_dim], Init::Zeros, rng));
        Self { w, b, in_dim, out_dim }
    }

    /// `x`: [n, in] → [n, out].
    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, x: &ArrayView2<'_, F>) -> Array2<F> {
        debug_assert_eq!(x.ncols(), self.in_dim);
        let w = ps.view2(self.w);
        let mut y = x.dot(&w.t());
        if let Some(b) = self.b {
            let b = ps.view1(b);
            for mut row in y.rows_mut() {
                row += &b;
            }
        }
        y
    }

    /// Returns dx; accumulates dW (and db) into `gs`.
    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &ArrayView2<'_, F>,
        dy: &ArrayView2<'_, F>,
        gs: &mut GradStore<F>,
    ) -> Array2<F> {
        let w = ps.view2(self.w);
        let dw = dy.t().dot(x);
        gs.add2(ps, self.w, &dw.view());
        if let Some(b) = self.b {
            let db: Array1<F> = dy.sum_axis(ndarray::Axis(0));
            gs.add(ps, b, db.as_slice().unwrap());
        }
        dy.dot(&w)
    }
}
