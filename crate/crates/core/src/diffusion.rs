//! Forward box corruption, noise schedule, signal scaling, and the
//! DDIM-style reverse update used for iterative box refinement.
//!
//! Box math runs in `f64` regardless of the model scalar; every stochastic
//! operation takes an explicit generator or a pre-drawn noise array.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cumulative signal coefficients for t = 0..=T with `alpha_bar[0] = 1`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub alpha_bar: Vec<f64>,
}

/// Floor applied when clipping the cosine schedule.
pub const ALPHA_BAR_FLOOR: f64 = 1e-5;

impl NoiseSchedule {
    /// Monotone non-increasing overall, strictly decreasing wherever the
    /// clip floor is not active, values in (0, 1].
    pub fn validate(&self) -> Result<()> {
        if self.alpha_bar.len() != self.t_max + 1 {
            return Err(Error::Config("schedule length must be T+1".into()));
        }
        if (self.alpha_bar[0] - 1.0).abs() > 1e-12 {
            return Err(Error::Config("alpha_bar[0] must be 1".into()));
        }
        for t in 1..=self.t_max {
            let (prev, cur) = (self.alpha_bar[t - 1], self.alpha_bar[t]);
            if !(cur > 0.0 && cur <= 1.0) {
                return Err(Error::Config(format!("alpha_bar[{t}] = {cur} out of (0,1]")));
            }
            if cur > prev {
                return Err(Error::Config(format!("alpha_bar increases at t = {t}")));
            }
            if cur == prev && cur > ALPHA_BAR_FLOOR {
                return Err(Error::Config(format!("alpha_bar stalls above floor at t = {t}")));
            }
        }
        Ok(())
    }
}

/// Cosine schedule: alpha_bar(t) = cos^2(((t/T + s)/(1+s)) * pi/2) normalized
/// to alpha_bar(0) = 1, with s = 0.008, clipped to [1e-5, 1].
pub fn make_cosine_schedule(t_max: usize) -> NoiseSchedule {
    assert!(t_max >= 1, "schedule needs at least one step");
    let s = 0.008;
    let f = |t: f64| {
        let x = (t / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let norm = f(0.0);
    let alpha_bar: Vec<f64> = (0..=t_max)
        .map(|t| (f(t as f64) / norm).clamp(ALPHA_BAR_FLOOR, 1.0))
        .collect();
    NoiseSchedule { t_max, alpha_bar }
}

/// Sampler knobs for the refinement loop.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    /// Signal scale `s`; normalized boxes map to [-s, s].
    pub signal_scale: f64,
    /// Proposals whose best class score falls below this are resampled
    /// between steps.
    pub renewal_threshold: f64,
    /// DDIM stochasticity; 0 is fully deterministic.
    pub ddim_eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: 1, signal_scale: 2.0, renewal_threshold: 0.5, ddim_eta: 0.0 }
    }
}

/// Affine map from [0, 1] box coordinates into the signal range [-s, s].
pub fn normalize_boxes(boxes: &Array2<f64>, signal_scale: f64) -> Array2<f64> {
    boxes.mapv(|b| (2.0 * b - 1.0) * signal_scale)
}

/// Inverse of [`normalize_boxes`].
pub fn denormalize_boxes(signal: &Array2<f64>, signal_scale: f64) -> Array2<f64> {
    signal.mapv(|x| (x / signal_scale + 1.0) / 2.0)
}

/// Forward diffusion: x_t = sqrt(a)·x0 + sqrt(1-a)·noise, clamped to [-s, s].
///
/// `x0` is in signal space; `noise` must be standard normal of the same shape.
pub fn q_sample(
    x0: &Array2<f64>,
    t: usize,
    noise: &Array2<f64>,
    schedule: &NoiseSchedule,
    signal_scale: f64,
) -> Array2<f64> {
    assert!(t >= 1 && t <= schedule.t_max, "t out of range");
    assert_eq!(x0.dim(), noise.dim());
    let a = schedule.alpha_bar[t];
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let mut out = x0 * sa + noise * sn;
    out.mapv_inplace(|v| v.clamp(-signal_scale, signal_scale));
    out
}

/// One DDIM update from t to t_prev given the model's clean-sample estimate.
///
/// With eta = 0 the step is deterministic; eta > 0 requires `noise`.
pub fn ddim_step(
    x_t: &Array2<f64>,
    pred_x0: &Array2<f64>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    if t_prev >= t {
        return Err(Error::InvalidInput(format!("t_prev ({t_prev}) must precede t ({t})")));
    }
    let a_t = schedule.alpha_bar[t];
    let a_prev = schedule.alpha_bar[t_prev];
    let eps_hat = (x_t - &(pred_x0 * a_t.sqrt())) / (1.0 - a_t).sqrt();
    let sigma = eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt();
    let dir_coef = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = pred_x0 * a_prev.sqrt() + &(eps_hat * dir_coef);
    if eta > 0.0 {
        let noise = noise.ok_or_else(|| {
            Error::InvalidInput("ddim_step with eta > 0 requires a noise array".into())
        })?;
        out = out + &(noise * sigma);
    }
    Ok(out)
}

/// Replace proposals whose best score is below the threshold with fresh
/// standard-normal signal-space samples; returns the renewed set and the
/// indices that were resampled.
pub fn box_renewal(
    boxes_signal: &Array2<f64>,
    scores: &[f64],
    threshold: f64,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Vec<usize>) {
    assert_eq!(boxes_signal.nrows(), scores.len());
    let mut out = boxes_signal.clone();
    let mut renewed = Vec::new();
    for (i, &s) in scores.iter().enumerate() {
        if s < threshold {
            renewed.push(i);
            for j in 0..4 {
                out[[i, j]] = f64::standard_normal(rng);
            }
        }
    }
    (out, renewed)
}

/// Pad ground-truth boxes to N proposals and corrupt them at step t.
///
/// Padding repeats existing ground truth (seeded draws, original boxes kept
/// first in their input order); with no ground truth at all, random
/// placeholder boxes are used. Returns `(x_t, x0)`, both in signal space.
pub fn train_corruption(
    gt_boxes: &[[f64; 4]],
    n: usize,
    t: usize,
    schedule: &NoiseSchedule,
    signal_scale: f64,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Array2<f64>) {
    assert!(n >= 1);
    let mut padded = Array2::zeros((n, 4));
    let m = gt_boxes.len();
    for i in 0..n {
        let b = if m == 0 {
            // no annotations: defined fallback of random plausible boxes
            [
                f64::uniform(rng, 0.0, 1.0),
                f64::uniform(rng, 0.0, 1.0),
                f64::uniform(rng, 0.1, 0.5),
                f64::uniform(rng, 0.1, 0.5),
            ]
        } else if i < m {
            gt_boxes[i]
        } else {
            gt_boxes[rng.random_range(0..m)]
        };
        for j in 0..4 {
            padded[[i, j]] = b[j];
        }
    }
    let x0 = normalize_boxes(&padded, signal_scale);
    let noise = Array2::from_shape_fn((n, 4), |_| f64::standard_normal(rng));
    let x_t = q_sample(&x0, t, &noise, schedule, signal_scale);
    (x_t, x0)
}
