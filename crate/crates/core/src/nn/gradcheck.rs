//! Central finite-difference utilities backing the gradient suites.
//!
//! Used by module tests and the acceptance gate; lives in the library (not
//! test code) so integration tests and the CLI diagnostics can share it.

use ndarray::{Array3, ArrayView3};

use crate::nn::params::ParamStore;

/// Central finite differences over every entry of a parameter store.
///
/// `f` must be a pure function of the store values.
pub fn fd_grad_params<L>(ps: &mut ParamStore<f64>, f: L, step: f64) -> Vec<f64>
where
    L: Fn(&ParamStore<f64>) -> f64,
{
    let n = ps.num_values();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let orig = ps.values()[i];
        ps.values_mut()[i] = orig + step;
        let fp = f(ps);
        ps.values_mut()[i] = orig - step;
        let fm = f(ps);
        ps.values_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Central finite differences at selected indices only; used where a full
/// sweep would dominate test time.
pub fn fd_grad_params_at<L>(
    ps: &mut ParamStore<f64>,
    indices: &[usize],
    f: L,
    step: f64,
) -> Vec<f64>
where
    L: Fn(&ParamStore<f64>) -> f64,
{
    let mut grad = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = ps.values()[i];
        ps.values_mut()[i] = orig + step;
        let fp = f(ps);
        ps.values_mut()[i] = orig - step;
        let fm = f(ps);
        ps.values_mut()[i] = orig;
        grad.push((fp - fm) / (2.0 * step));
    }
    grad
}

/// Central finite differences w.r.t. a [C, H, W] input array.
pub fn fd_grad_array3<L>(x: &Array3<f64>, f: L, step: f64) -> Array3<f64>
where
    L: Fn(&ArrayView3<'_, f64>) -> f64,
{
    let mut x = x.clone();
    let dim = x.dim();
    let mut grad = Array3::zeros(dim);
    for idx in ndarray::indices(dim) {
        let orig = x[idx];
        x[idx] = orig + step;
        let fp = f(&x.view());
        x[idx] = orig - step;
        let fm = f(&x.view());
        x[idx] = orig;
        grad[idx] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Relative error with an absolute floor so near-zero entries compare on
/// finite-difference noise rather than blowing up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error between an analytic and a numeric gradient vector.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
