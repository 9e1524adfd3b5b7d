//! Element-wise and shape primitives with explicit backward rules.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};

use crate::scalar::Scalar;

/// Aᵀ·v for a row-major A, streaming rows once instead of striding columns
/// (the naive `a.t().dot(&v)` walks the matrix column-wise, which is hostile
/// to caches for large A).
pub fn matvec_transposed<F: Scalar>(a: &ArrayView2<'_, F>, v: &ArrayView1<'_, F>) -> Array1<F> {
    let (rows, cols) = a.dim();
    debug_assert_eq!(rows, v.len());
    let mut out = Array1::<F>::zeros(cols);
    let outs = out.as_slice_mut().unwrap();
    match a.as_slice() {
        Some(data) => {
            for (i, &vi) in v.iter().enumerate() {
                if vi == F::zero() {
                    continue;
                }
                let row = &data[i * cols..(i + 1) * cols];
                for (o, &r) in outs.iter_mut().zip(row) {
                    *o += vi * r;
                }
            }
        }
        None => {
            for (i, &vi) in v.iter().enumerate() {
                for (o, &r) in outs.iter_mut().zip(a.row(i)) {
                    *o += vi * r;
                }
            }
        }
    }
    out
}

#[inline]
pub fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn relu1<F: Scalar>(x: &ArrayView1<'_, F>) -> Array1<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// d(relu)/dx given the forward input.
pub fn relu1_backward<F: Scalar>(x: &ArrayView1<'_, F>, dy: &ArrayView1<'_, F>) -> Array1<F> {
    let mut dx = dy.to_owned();
    for (d, &v) in dx.iter_mut().zip(x.iter()) {
        if v <= F::zero() {
            *d = F::zero();
        }
    }
    dx
}

pub fn relu2<F: Scalar>(x: &ArrayView2<'_, F>) -> Array2<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu2_backward<F: Scalar>(x: &ArrayView2<'_, F>, dy: &ArrayView2<'_, F>) -> Array2<F> {
    let mut dx = dy.to_owned();
    for (d, &v) in dx.iter_mut().zip(x.iter()) {
        if v <= F::zero() {
            *d = F::zero();
        }
    }
    dx
}

pub fn relu3<F: Scalar>(x: &ArrayView3<'_, F>) -> Array3<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu3_backward<F: Scalar>(x: &ArrayView3<'_, F>, dy: &ArrayView3<'_, F>) -> Array3<F> {
    let mut dx = dy.to_owned();
    for (d, &v) in dx.iter_mut().zip(x.iter()) {
        if v <= F::zero() {
            *d = F::zero();
        }
    }
    dx
}

pub fn sigmoid1<F: Scalar>(x: &ArrayView1<'_, F>) -> Array1<F> {
    x.mapv(sigmoid_scalar)
}

/// d(sigmoid)/dx expressed through the forward output `y`.
pub fn sigmoid1_backward<F: Scalar>(y: &ArrayView1<'_, F>, dy: &ArrayView1<'_, F>) -> Array1<F> {
    let mut dx = dy.to_owned();
    for (d, &v) in dx.iter_mut().zip(y.iter()) {
        *d = *d * v * (F::one() - v);
    }
    dx
}

/// Numerically safe softmax over a vector.
pub fn softmax1<F: Scalar>(x: &ArrayView1<'_, F>) -> Array1<F> {
    let m = x.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps = x.mapv(|v| (v - m).exp());
    let s = exps.sum();
    exps.mapv(|v| v / s)
}

/// Softmax Jacobian-vector product: dx = y ⊙ (dy − <dy, y>).
pub fn softmax1_backward<F: Scalar>(y: &ArrayView1<'_, F>, dy: &ArrayView1<'_, F>) -> Array1<F> {
    let dot: F = y.iter().zip(dy.iter()).map(|(&a, &b)| a * b).sum();
    let mut dx = Array1::zeros(y.len());
    for i in 0..y.len() {
        dx[i] = y[i] * (dy[i] - dot);
    }
    dx
}

/// Nearest-neighbour 2x upsample of a [C, H, W] map.
pub fn upsample2x<F: Scalar>(x: &ArrayView3<'_, F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for yi in 0..h * 2 {
            for xi in 0..w * 2 {
                y[[ci, yi, xi]] = x[[ci, yi / 2, xi / 2]];
            }
        }
    }
    y
}

/// Gradient of [`upsample2x`]: 2x2 sum pooling.
pub fn upsample2x_backward<F: Scalar>(dy: &ArrayView3<'_, F>) -> Array3<F> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for yi in 0..h2 {
            for xi in 0..w2 {
                dx[[ci, yi / 2, xi / 2]] += dy[[ci, yi, xi]];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_sums_to_one_and_backward_is_orthogonal_to_ones() {
        let x = array![1.0_f64, 2.0, -0.5, 0.0];
        let y = softmax1(&x.view());
        assert!((y.sum() - 1.0).abs() < 1e-12);
        let dy = array![0.3_f64, -0.1, 0.7, 0.2];
        let dx = softmax1_backward(&y.view(), &dy.view());
        // Softmax output lives on the simplex, so gradients sum to zero.
        assert!(dx.sum().abs() < 1e-12);
    }

    #[test]
    fn upsample_roundtrip_shapes() {
        let x = Array3::<f64>::from_shape_fn((2, 3, 4), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let up = upsample2x(&x.view());
        assert_eq!(up.dim(), (2, 6, 8));
        assert_eq!(up[[1, 5, 7]], x[[1, 2, 3]]);
        let back = upsample2x_backward(&up.view());
        // each source cell receives its value 4 times
        assert_eq!(back[[1, 2, 3]], 4.0 * x[[1, 2, 3]]);
    }
}
