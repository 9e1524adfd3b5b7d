//! Modality codecs: polarimetric parameter extraction and encoding, depth
//! colorization, and infrared replication.
//!
//! All operations are pure functions over immutable inputs and can be called
//! concurrently.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::viridis::VIRIDIS;

/// Default denominator floor for the degree-of-polarization ratio.
pub const DOLP_EPS: f64 = 1e-8;

/// Raw intensities measured behind the four polarizer angles.
#[derive(Debug, Clone)]
pub struct PolarimetricRaw {
    pub p0: Array2<f64>,
    pub p45: Array2<f64>,
    pub p90: Array2<f64>,
    pub p135: Array2<f64>,
}

impl PolarimetricRaw {
    pub fn new(
        p0: Array2<f64>,
        p45: Array2<f64>,
        p90: Array2<f64>,
        p135: Array2<f64>,
    ) -> Result<Self> {
        let shape = p0.dim();
        for (name, arr) in [("p45", &p45), ("p90", &p90), ("p135", &p135)] {
            if arr.dim() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "{name} has shape {:?}, expected {:?}",
                    arr.dim(),
                    shape
                )));
            }
        }
        for (name, arr) in [("p0", &p0), ("p45", &p45), ("p90", &p90), ("p135", &p135)] {
            if arr.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "{name} contains negative or non-finite intensities"
                )));
            }
        }
        Ok(Self { p0, p45, p90, p135 })
    }
}

/// Intensity, degree, and angle of linear polarization per pixel.
///
/// `dolp` is clamped to [0, 1]; `aolp` lies in (-pi/2, pi/2] with the
/// degenerate (fully unpolarized) pixel mapped to 0.
#[derive(Debug, Clone)]
pub struct PolarimetricParams {
    pub intensity: Array2<f64>,
    pub dolp: Array2<f64>,
    pub aolp: Array2<f64>,
}

/// Three-channel encoding [sin 2a, cos 2a, 2d - 1], values in [-1, 1].
#[derive(Debug, Clone)]
pub struct EncodedPolar {
    pub channels: Array3<f64>,
}

/// Compute intensity, DoLP, and AoLP from the four polarizer intensities.
///
/// Uses the two-argument arctangent so the quadrant survives and the
/// division-by-zero case of the textbook single-argument form cannot occur;
/// pixels with both Stokes components zero get `aolp = 0` by convention.
pub fn compute_stokes_params(raw: &PolarimetricRaw, eps: f64) -> PolarimetricParams {
    let shape = raw.p0.dim();
    let mut intensity = Array2::zeros(shape);
    let mut dolp = Array2::zeros(shape);
    let mut aolp = Array2::zeros(shape);
    for ((y, x), i_out) in intensity.indexed_iter_mut() {
        let p0 = raw.p0[[y, x]];
        let p45 = raw.p45[[y, x]];
        let p90 = raw.p90[[y, x]];
        let p135 = raw.p135[[y, x]];
        let i = (p0 + p45 + p90 + p135) / 2.0;
        let s1 = p0 - p90;
        let s2 = p45 - p135;
        *i_out = i;
        dolp[[y, x]] = ((s1 * s1 + s2 * s2).sqrt() / i.max(eps)).clamp(0.0, 1.0);
        aolp[[y, x]] = if s1 == 0.0 && s2 == 0.0 { 0.0 } else { 0.5 * s2.atan2(s1) };
    }
    PolarimetricParams { intensity, dolp, aolp }
}

/// Map polarization parameters into the three-channel representation.
pub fn encode_polar(params: &PolarimetricParams) -> EncodedPolar {
    let (h, w) = params.dolp.dim();
    let mut channels = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let two_a = 2.0 * params.aolp[[y, x]];
            channels[[0, y, x]] = two_a.sin();
            channels[[1, y, x]] = two_a.cos();
            channels[[2, y, x]] = 2.0 * params.dolp[[y, x]] - 1.0;
        }
    }
    EncodedPolar { channels }
}

/// Decoded parameters plus a consistency diagnostic.
#[derive(Debug, Clone)]
pub struct DecodedPolar {
    pub dolp: Array2<f64>,
    /// Recovered modulo pi.
    pub aolp: Array2<f64>,
    /// Pixels whose (sin, cos) pair deviates from the unit circle beyond tolerance.
    pub inconsistent_pixels: usize,
}

/// Invert [`encode_polar`] (intensity is not recoverable).
///
/// AoLP comes back modulo pi. Pixels with `|ch0^2 + ch1^2 - 1| > unit_tol`
/// are counted in `inconsistent_pixels` as a warning, not an error.
pub fn decode_polar(enc: &EncodedPolar, unit_tol: f64) -> DecodedPolar {
    let (_, h, w) = enc.channels.dim();
    let mut dolp = Array2::zeros((h, w));
    let mut aolp = Array2::zeros((h, w));
    let mut inconsistent = 0usize;
    for y in 0..h {
        for x in 0..w {
            let s = enc.channels[[0, y, x]];
            let c = enc.channels[[1, y, x]];
            if (s * s + c * c - 1.0).abs() > unit_tol {
                inconsistent += 1;
            }
            aolp[[y, x]] = 0.5 * s.atan2(c);
            dolp[[y, x]] = (enc.channels[[2, y, x]] + 1.0) / 2.0;
        }
    }
    DecodedPolar { dolp, aolp, inconsistent_pixels: inconsistent }
}

/// Depth image in meters (or any monotone unit) with an optional validity mask.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub values: Array2<f64>,
    /// `true` marks valid pixels; `None` treats every finite pixel as valid.
    pub valid: Option<Array2<bool>>,
}

impl DepthMap {
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.values[[y, x]].is_finite()
            && self.valid.as_ref().map_or(true, |m| m[[y, x]])
    }
}

/// Colormap index for a normalized depth in [0, 1].
///
/// Rounding rule: round-half-down, so the exact midpoint maps to entry 127.
pub fn depth_colormap_index(t: f64) -> usize {
    let idx = (t.clamp(0.0, 1.0) * 255.0 - 0.5).ceil();
    (idx.max(0.0) as usize).min(255)
}

/// Colorize depth through the embedded 256-entry colormap.
///
/// Returns the [3, H, W] image (entries scaled to [0, 1]) plus a warning flag
/// set when no valid pixel exists (output is then all zeros).
pub fn depth_to_rgb(depth: &DepthMap, d_min: f64, d_max: f64) -> Result<(Array3<f64>, bool)> {
    if !(d_min < d_max) {
        return Err(Error::InvalidInput(format!(
            "d_min ({d_min}) must be below d_max ({d_max})"
        )));
    }
    let (h, w) = depth.values.dim();
    let any_valid = (0..h).any(|y| (0..w).any(|x| depth.is_valid(y, x)));
    let mut out = Array3::zeros((3, h, w));
    if !any_valid {
        return Ok((out, true));
    }
    let range = d_max - d_min;
    for y in 0..h {
        for x in 0..w {
            let idx = if depth.is_valid(y, x) {
                depth_colormap_index((depth.values[[y, x]] - d_min) / range)
            } else {
                0
            };
            let rgb = VIRIDIS[idx];
            for c in 0..3 {
                out[[c, y, x]] = rgb[c] as f64 / 255.0;
            }
        }
    }
    Ok((out, false))
}

/// Replicate a single-channel infrared image across three channels.
pub fn ir_to_rgb(ir: &ArrayView2<'_, f64>) -> Array3<f64> {
    let (h, w) = ir.dim();
    let mut out = Array3::zeros((3, h, w));
    for c in 0..3 {
        out.index_axis_mut(ndarray::Axis(0), c).assign(ir);
    }
    out
}
