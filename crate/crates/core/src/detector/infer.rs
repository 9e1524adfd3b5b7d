//! Iterative inference: start from noise-initialized proposals, run the
//! decoder, step the sampler toward the predicted boxes, renew low-score
//! proposals, repeat; finish with score filtering and per-class NMS.
//!
//! A single-step configuration is exactly one decoder pass at t = T with no
//! sampler update.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::modality_attention_rate;
use crate::diffusion::{box_renewal, ddim_step, denormalize_boxes, normalize_boxes, SamplerConfig};
use crate::dmlab::ProposalBox;
use crate::error::Result;
use crate::nn::ops::sigmoid_scalar;
use crate::scalar::Scalar;

use super::config::EncoderMode;
use super::dataset::to_model_input;
use super::eval::{nms, Detection};
use super::Model;

/// Per-image diagnostics captured during inference.
pub struct InferenceDiagnostics<F> {
    /// Channel attention per level plus (rgb, x) attention rates.
    pub attention: Vec<(Array1<F>, (f64, f64))>,
    /// DMLAB weights per proposal and level from the initial step.
    pub dmlab_weights: Option<Array2<F>>,
}

pub struct InferenceResult<F> {
    pub detections: Vec<Detection>,
    pub diagnostics: InferenceDiagnostics<F>,
}

/// Evenly spaced timesteps from T down to 0 (inclusive), `steps + 1` entries.
pub fn sampling_timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    (0..=steps)
        .map(|k| ((t_max as f64) * (steps - k) as f64 / steps as f64).round() as usize)
        .collect()
}

fn boxes01_to_proposals(b: &Array2<f64>) -> Vec<ProposalBox> {
    (0..b.nrows())
        .map(|i| {
            ProposalBox { cx: b[[i, 0]], cy: b[[i, 1]], w: b[[i, 2]], h: b[[i, 3]] }.clamped()
        })
        .collect()
}

/// Run the full sampling loop on one image pair ([0, 1] range inputs).
pub fn infer_sample<F: Scalar>(
    model: &Model<F>,
    rgb01: &ndarray::Array3<F>,
    aux01: Option<&ndarray::Array3<F>>,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<InferenceResult<F>> {
    let cfg = &model.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image_size = (rgb01.dim().1, rgb01.dim().2);

    let rgb = to_model_input(rgb01);
    let aux = match cfg.mode {
        EncoderMode::Fused => Some(to_model_input(aux01.ok_or_else(|| {
            crate::Error::InvalidInput("fused inference needs the auxiliary modality".into())
        })?)),
        EncoderMode::RgbOnly => None,
    };
    let (enc_out, _) =
        model
            .encoder
            .forward(&model.ps, &rgb.view(), aux.as_ref().map(|a| a.view()).as_ref())?;

    let attention = enc_out
        .attn
        .iter()
        .map(|(m_c, _)| {
            let rates = modality_attention_rate(&m_c.view(), cfg.branch_width);
            (m_c.clone(), rates)
        })
        .collect();

    let n = cfg.num_proposals;
    let s = sampler.signal_scale;
    let mut x_t = Array2::from_shape_fn((n, 4), |_| f64::standard_normal(&mut rng))
        .mapv(|v: f64| v.clamp(-s, s));

    let ts = sampling_timesteps(cfg.t_max, sampler.num_steps);
    let mut prev_feats: Option<Array2<F>> = None;
    let mut dmlab_weights = None;
    let mut final_out = None;

    for k in 0..sampler.num_steps {
        let t = ts[k];
        let boxes01 = denormalize_boxes(&x_t, s);
        let proposals = boxes01_to_proposals(&boxes01);
        let prev_view = prev_feats.as_ref().map(|p: &Array2<F>| p.view());
        let (out, _cache) = model.decoder.forward_step(
            &model.ps,
            &enc_out.pyramid,
            &proposals,
            prev_view.as_ref(),
            t,
            k == 0,
            image_size,
        );
        if k == 0 {
            dmlab_weights = out.dmlab_weights.clone();
        }
        if k + 1 == sampler.num_steps {
            final_out = Some(out);
            break;
        }
        // sampler update toward the predicted clean boxes
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                (0..cfg.num_classes)
                    .map(|c| sigmoid_scalar(out.logits[[i, c]]).into_f64())
                    .fold(0.0, f64::max)
            })
            .collect();
        let mut pred = Array2::zeros((n, 4));
        for (i, b) in out.pred_boxes.iter().enumerate() {
            for j in 0..4 {
                pred[[i, j]] = b[j];
            }
        }
        let pred_signal = normalize_boxes(&pred, s).mapv(|v| v.clamp(-s, s));
        let noise = (sampler.ddim_eta > 0.0)
            .then(|| Array2::from_shape_fn((n, 4), |_| f64::standard_normal(&mut rng)));
        x_t = ddim_step(
            &x_t,
            &pred_signal,
            t,
            ts[k + 1],
            &model.schedule,
            sampler.ddim_eta,
            noise.as_ref(),
        )?;
        x_t.mapv_inplace(|v| v.clamp(-s, s));
        let (renewed, _) = box_renewal(&x_t, &scores, sampler.renewal_threshold, &mut rng);
        x_t = renewed;
        prev_feats = Some(out.feats);
    }

    let out = final_out.expect("at least one sampling step");
    let (img_h, img_w) = (image_size.0 as f64, image_size.1 as f64);
    let mut dets = Vec::new();
    for (i, b) in out.pred_boxes.iter().enumerate() {
        let (mut best_c, mut best_s) = (0usize, f64::NEG_INFINITY);
        for c in 0..cfg.num_classes {
            let p = sigmoid_scalar(out.logits[[i, c]]).into_f64();
            if p > best_s {
                best_s = p;
                best_c = c;
            }
        }
        if best_s < cfg.score_threshold {
            continue;
        }
        let x1 = ((b[0] - b[2] / 2.0) * img_w).clamp(0.0, img_w);
        let y1 = ((b[1] - b[3] / 2.0) * img_h).clamp(0.0, img_h);
        let x2 = ((b[0] + b[2] / 2.0) * img_w).clamp(0.0, img_w);
        let y2 = ((b[1] + b[3] / 2.0) * img_h).clamp(0.0, img_h);
        if x2 <= x1 || y2 <= y1 {
            continue;
        }
        dets.push(Detection { bbox: [x1, y1, x2, y2], class: best_c, score: best_s });
    }
    let detections = nms(dets, cfg.nms_iou);
    Ok(InferenceResult {
        detections,
        diagnostics: InferenceDiagnostics { attention, dmlab_weights },
    })
}
