//! Explained-variance analysis of feature maps: channels are the variables,
//! every pixel of every map is one observation.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct FeatureEnergy {
    /// Explained-variance ratios, sorted descending.
    pub energies: Vec<f64>,
    /// Set when the covariance was rank-deficient and fewer components than
    /// requested could be returned.
    pub truncated: bool,
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix (values only).
fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    if n == 1 {
        return vec![a[0][0]];
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Top-`n_components` explained-variance ratios of a set of feature maps.
pub fn pca_feature_energy<F: Scalar>(
    features: &[Array3<F>],
    n_components: usize,
) -> Result<FeatureEnergy> {
    if features.len() < 2 && features.iter().map(|f| f.dim().1 * f.dim().2).sum::<usize>() < 2 {
        return Err(Error::InvalidInput("need at least two observations".into()));
    }
    let c = features[0].dim().0;
    if features.iter().any(|f| f.dim().0 != c) {
        return Err(Error::ShapeMismatch("feature maps must share channel width".into()));
    }
    let n_obs: usize = features.iter().map(|f| f.dim().1 * f.dim().2).sum();
    if n_obs < 2 {
        return Err(Error::InvalidInput("need at least two observations".into()));
    }

    let mut mean = vec![0.0f64; c];
    for f in features {
        for ci in 0..c {
            for v in f.index_axis(ndarray::Axis(0), ci).iter() {
                mean[ci] += v.into_f64();
            }
        }
    }
    for m in &mut mean {
        *m /= n_obs as f64;
    }

    let mut cov = vec![vec![0.0f64; c]; c];
    for f in features {
        let (_, h, w) = f.dim();
        for y in 0..h {
            for x in 0..w {
                for i in 0..c {
                    let di = f[[i, y, x]].into_f64() - mean[i];
                    for j in i..c {
                        cov[i][j] += di * (f[[j, y, x]].into_f64() - mean[j]);
                    }
                }
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cov[i][j] /= (n_obs - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }

    let mut eig = symmetric_eigenvalues(cov);
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let total: f64 = eig.iter().filter(|&&v| v > 0.0).sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("degenerate covariance: no variance at all".into()));
    }
    let positive: Vec<f64> = eig.into_iter().filter(|&v| v > 1e-12 * total).collect();
    let truncated = positive.len() < n_components;
    let energies: Vec<f64> = positive
        .iter()
        .take(n_components)
        .map(|&v| v / total)
        .collect();
    Ok(FeatureEnergy { energies, truncated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_one_features_have_unit_first_energy() {
        // every channel is a multiple of the same spatial pattern
        let base = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| ((y * 8 + x) as f64 * 0.3).sin());
        let f = Array3::from_shape_fn((4, 8, 8), |(c, y, x)| {
            (c as f64 + 1.0) * base[[0, y, x]]
        });
        let r = pca_feature_energy(&[f], 3).unwrap();
        assert!((r.energies[0] - 1.0).abs() < 1e-9);
        assert!(r.truncated, "rank-1 set cannot yield 3 components");
    }

    #[test]
    fn isotropic_noise_splits_energy_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let maps: Vec<Array3<f64>> = (0..3)
            .map(|_| {
                Array3::from_shape_fn((4, 58, 58), |_| f64::standard_normal(&mut rng))
            })
            .collect();
        let r = pca_feature_energy(&maps, 4).unwrap();
        assert_eq!(r.energies.len(), 4);
        for &e in &r.energies {
            assert!((e - 0.25).abs() < 0.02, "energy {e} strays from isotropy");
        }
    }

    #[test]
    fn energies_sorted_and_sum_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let maps: Vec<Array3<f64>> = (0..2)
            .map(|_| {
                Array3::from_shape_fn((6, 16, 16), |(c, _, _)| {
                    f64::standard_normal(&mut rng) * (1.0 + c as f64)
                })
            })
            .collect();
        let r = pca_feature_energy(&maps, 6).unwrap();
        for w in r.energies.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
        let sum: f64 = r.energies.iter().sum();
        assert!(sum <= 1.0 + 1e-9);
    }

    #[test]
    fn eigenvalues_match_known_matrix() {
        // [[2, 1], [1, 2]] has eigenvalues 3 and 1
        let eig = symmetric_eigenvalues(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        let mut e = eig.clone();
        e.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((e[0] - 3.0).abs() < 1e-10);
        assert!((e[1] - 1.0).abs() < 1e-10);
    }
}
