//! Training loop: sample batch, corrupt ground-truth boxes, one decoder pass
//! at a random diffusion step, Hungarian assignment, total loss, AdamW
//! update. Batch items run in parallel on fixed worker slots and gradients
//! reduce in slot order, so a fixed seed reproduces the loss trajectory
//! bitwise.

use std::io::Write as IoWrite;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffusion::{denormalize_boxes, train_corruption};
use crate::dmlab::ProposalBox;
use crate::error::{Error, Result};
use crate::losses::{
    channel_saliency_reg, focal_loss, giou_loss, hungarian_match, l1_box_loss, matching_costs,
    rasterize_boxes, resize_mask, spatial_focus_reg, total_loss, LossBreakdown,
};
use crate::nn::adamw::AdamW;
use crate::nn::params::GradStore;
use crate::scalar::Scalar;

use super::config::{EncoderMode, TrainConfig};
use super::dataset::{load_dataset, to_model_input, Sample};
use super::Model;

pub struct TrainOutput<F> {
    pub model: Model<F>,
    pub loss_log: Vec<(usize, LossBreakdown)>,
    pub final_loss: LossBreakdown,
}

struct ItemJob {
    sample_idx: usize,
    t: usize,
    seed: u64,
}

/// One item's forward/backward; gradients accumulate into `gs`.
fn train_item<F: Scalar>(
    model: &Model<F>,
    sample: &Sample<F>,
    t: usize,
    seed: u64,
    gs: &mut GradStore<F>,
) -> Result<LossBreakdown> {
    let cfg = &model.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = to_model_input(&sample.rgb);
    let aux = match cfg.mode {
        EncoderMode::Fused => Some(to_model_input(sample.aux.as_ref().ok_or_else(|| {
            Error::InvalidInput("fused training needs the auxiliary modality".into())
        })?)),
        EncoderMode::RgbOnly => None,
    };
    let (enc_out, enc_cache) =
        model
            .encoder
            .forward(&model.ps, &rgb.view(), aux.as_ref().map(|a| a.view()).as_ref())?;

    let gt_classes: Vec<usize> = sample.gts.iter().map(|g| g.class).collect();
    let gt_boxes: Vec<[f64; 4]> = sample.gts.iter().map(|g| [g.cx, g.cy, g.w, g.h]).collect();

    let (x_t, _x0) = train_corruption(
        &gt_boxes,
        cfg.num_proposals,
        t,
        &model.schedule,
        cfg.sampler.signal_scale,
        &mut rng,
    );
    let boxes01 = denormalize_boxes(&x_t, cfg.sampler.signal_scale);
    let proposals: Vec<ProposalBox> = (0..cfg.num_proposals)
        .map(|i| {
            ProposalBox {
                cx: boxes01[[i, 0]],
                cy: boxes01[[i, 1]],
                w: boxes01[[i, 2]],
                h: boxes01[[i, 3]],
            }
            .clamped()
        })
        .collect();

    let image_size = (sample.height, sample.width);
    let (dec_out, dec_cache) = model.decoder.forward_step(
        &model.ps,
        &enc_out.pyramid,
        &proposals,
        None,
        t,
        true,
        image_size,
    );

    // assignment on f64 copies of the outputs
    let logits64 = dec_out.logits.mapv(|v| v.into_f64());
    let costs = matching_costs(
        &logits64.view(),
        &dec_out.pred_boxes,
        &gt_classes,
        &gt_boxes,
        &cfg.loss,
        cfg.focal_alpha,
        cfg.focal_gamma,
    );
    let matches = hungarian_match(&costs.view())?;

    let mut targets = vec![None; cfg.num_proposals];
    for &(p, g) in &matches.pairs {
        targets[p] = Some(gt_classes[g]);
    }
    let (l_label, d_logits64) =
        focal_loss(&logits64.view(), &targets, cfg.focal_alpha, cfg.focal_gamma);

    let m = matches.pairs.len().max(1) as f64;
    let mut l_bbox = 0.0;
    let mut l_giou = 0.0;
    let mut d_pred = Array2::<f64>::zeros((cfg.num_proposals, 4));
    for &(p, g) in &matches.pairs {
        let (l1, g1) = l1_box_loss(&dec_out.pred_boxes[p], &gt_boxes[g]);
        let gi = giou_loss(&dec_out.pred_boxes[p], &gt_boxes[g]);
        l_bbox += l1 / m;
        l_giou += gi.loss / m;
        for j in 0..4 {
            d_pred[[p, j]] +=
                (cfg.loss.lambda_bbox * g1[j] + cfg.loss.lambda_giou * gi.grad_pred[j]) / m;
        }
    }

    // attention regularizers (fused mode only)
    let (theta_mc, theta_ms, d_mc, d_ms) = if enc_out.attn.is_empty() {
        (0.0, 0.0, None, None)
    } else {
        let m_c_list: Vec<Array1<F>> = enc_out.attn.iter().map(|(c, _)| c.clone()).collect();
        let (theta_mc, d_mc) = channel_saliency_reg(&m_c_list, &cfg.loss.lambda_c);
        let gt_px: Vec<[f64; 4]> = sample
            .gts
            .iter()
            .map(|g| {
                let w = sample.width as f64;
                let h = sample.height as f64;
                [
                    (g.cx - g.w / 2.0) * w,
                    (g.cy - g.h / 2.0) * h,
                    (g.cx + g.w / 2.0) * w,
                    (g.cy + g.h / 2.0) * h,
                ]
            })
            .collect();
        let full_mask = rasterize_boxes(&gt_px, sample.height, sample.width);
        let m_s_list: Vec<_> = enc_out.attn.iter().map(|(_, s)| s.clone()).collect();
        let masks: Vec<_> = m_s_list
            .iter()
            .map(|m_s| resize_mask(&full_mask.view(), m_s.dim().0, m_s.dim().1))
            .collect();
        let (theta_ms, d_ms) =
            spatial_focus_reg(&m_s_list, &masks, &cfg.loss.lambda_s, cfg.exterior_penalty)?;
        (theta_mc, theta_ms, Some(d_mc), Some(d_ms))
    };

    let breakdown = total_loss(l_label, l_bbox, l_giou, theta_mc, theta_ms, &cfg.loss);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            iter: 0,
            detail: format!(
                "label={} bbox={} giou={} theta_mc={} theta_ms={}",
                breakdown.label, breakdown.bbox, breakdown.giou, theta_mc, theta_ms
            ),
        });
    }

    // backward
    let d_logits = d_logits64.mapv(|v| F::from_f64(cfg.loss.lambda_label * v));
    let (d_pyramid, _) =
        model
            .decoder
            .backward_step(&model.ps, &dec_cache, &d_logits.view(), &d_pred.view(), gs);
    model.encoder.backward(
        &model.ps,
        &enc_cache,
        &d_pyramid,
        d_mc.as_deref(),
        d_ms.as_deref(),
        gs,
    );
    Ok(breakdown)
}

fn add_breakdown(acc: &mut LossBreakdown, item: &LossBreakdown) {
    acc.label += item.label;
    acc.bbox += item.bbox;
    acc.giou += item.giou;
    acc.theta_mc += item.theta_mc;
    acc.theta_ms += item.theta_ms;
    acc.total += item.total;
}

fn scale_breakdown(acc: &mut LossBreakdown, f: f64) {
    acc.label *= f;
    acc.bbox *= f;
    acc.giou *= f;
    acc.theta_mc *= f;
    acc.theta_ms *= f;
    acc.total *= f;
}

/// One optimizer step over a drawn batch; returns the averaged breakdown.
/// Exposed so invariants (gradient coverage, determinism) can probe single
/// steps directly.
pub fn train_step<F: Scalar>(
    model: &mut Model<F>,
    samples: &[Sample<F>],
    opt: &mut AdamW,
    rng: &mut ChaCha8Rng,
    batch_size: usize,
    lr_scale: f64,
    worker_bufs: &mut [GradStore<F>],
    grads: &mut GradStore<F>,
) -> Result<LossBreakdown> {
    let jobs: Vec<ItemJob> = (0..batch_size)
        .map(|_| ItemJob {
            sample_idx: rng.random_range(0..samples.len()),
            t: rng.random_range(1..=model.cfg.t_max),
            seed: rng.random(),
        })
        .collect();

    // fixed assignment of jobs to worker slots keeps reduction order stable
    let n_workers = worker_bufs.len();
    let chunk = batch_size.div_ceil(n_workers).max(1);
    let job_chunks: Vec<&[ItemJob]> = (0..n_workers)
        .map(|w| {
            let lo = (w * chunk).min(jobs.len());
            let hi = ((w + 1) * chunk).min(jobs.len());
            &jobs[lo..hi]
        })
        .collect();
    let model_ref = &*model;
    let results: Vec<Result<LossBreakdown>> = worker_bufs
        .par_iter_mut()
        .zip(job_chunks.into_par_iter())
        .map(|(buf, chunk_jobs)| {
            let mut acc = LossBreakdown {
                label: 0.0,
                bbox: 0.0,
                giou: 0.0,
                theta_mc: 0.0,
                theta_ms: 0.0,
                total: 0.0,
            };
            for job in chunk_jobs {
                let b = train_item(model_ref, &samples[job.sample_idx], job.t, job.seed, buf)?;
                add_breakdown(&mut acc, &b);
            }
            Ok(acc)
        })
        .collect();

    grads.reset();
    let mut breakdown = LossBreakdown {
        label: 0.0,
        bbox: 0.0,
        giou: 0.0,
        theta_mc: 0.0,
        theta_ms: 0.0,
        total: 0.0,
    };
    for (buf, res) in worker_bufs.iter_mut().zip(results) {
        let b = res?;
        add_breakdown(&mut breakdown, &b);
        grads.merge(buf);
        buf.reset();
    }
    let inv_b = 1.0 / batch_size as f64;
    scale_breakdown(&mut breakdown, inv_b);
    grads.scale(F::from_f64(inv_b));

    opt.step(&mut model.ps, grads, lr_scale);
    Ok(breakdown)
}

/// Full training over in-memory samples, writing checkpoints and the loss
/// CSV under `cfg.out_dir`. `resume_from` restores parameters, optimizer
/// moments, iteration counter, and the RNG stream.
pub fn train_with_samples<F: Scalar>(
    cfg: &TrainConfig,
    samples: &[Sample<F>],
    resume_from: Option<&Path>,
) -> Result<TrainOutput<F>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir)?;

    let (mut model, mut opt, mut rng, start_iter) = match resume_from {
        Some(path) => {
            let (model, ckpt) = Model::<F>::load(path)?;
            if ckpt.config != cfg.model {
                return Err(Error::Checkpoint(
                    "checkpoint config differs from the training config".into(),
                ));
            }
            let opt = super::checkpoint::restore_adam(cfg.optimizer.clone(), &model.ps, &ckpt)?;
            let rng = ckpt
                .rng
                .clone()
                .ok_or_else(|| Error::Checkpoint("checkpoint lacks an RNG state".into()))?;
            (model, opt, rng, ckpt.iter as usize)
        }
        None => {
            let model = Model::<F>::build(&cfg.model)?;
            let opt = AdamW::new(cfg.optimizer.clone(), &model.ps);
            // training stream decoupled from the parameter-init stream
            let rng = ChaCha8Rng::seed_from_u64(cfg.model.seed.wrapping_add(0x5eed));
            (model, opt, rng, 0)
        }
    };

    let n_workers = rayon::current_num_threads().min(cfg.batch_size).max(1);
    let mut worker_bufs: Vec<GradStore<F>> =
        (0..n_workers).map(|_| GradStore::zeros_for(&model.ps)).collect();
    let mut grads = GradStore::zeros_for(&model.ps);

    let csv_path = out_dir.join("loss.csv");
    let mut csv = std::io::BufWriter::new(if start_iter > 0 && csv_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&csv_path)?
    } else {
        let mut f = std::fs::File::create(&csv_path)?;
        writeln!(f, "iter,label,bbox,giou,theta_mc,theta_ms,total")?;
        f
    });

    let mut loss_log = Vec::new();
    let mut last = LossBreakdown {
        label: 0.0,
        bbox: 0.0,
        giou: 0.0,
        theta_mc: 0.0,
        theta_ms: 0.0,
        total: 0.0,
    };
    for iter in start_iter..cfg.iterations {
        let lr_scale = if cfg.warmup_iters > 0 && iter < cfg.warmup_iters {
            (iter + 1) as f64 / cfg.warmup_iters as f64
        } else {
            1.0
        };
        let breakdown = train_step(
            &mut model,
            samples,
            &mut opt,
            &mut rng,
            cfg.batch_size,
            lr_scale,
            &mut worker_bufs,
            &mut grads,
        )
        .map_err(|e| match e {
            Error::NonFiniteLoss { detail, .. } => {
                let dump = out_dir.join("nonfinite_dump.txt");
                let _ = std::fs::write(&dump, format!("iter {iter}: {detail}\n"));
                Error::NonFiniteLoss { iter, detail }
            }
            other => other,
        })?;
        writeln!(
            csv,
            "{},{:.6},{:.6},{:.6},{:.8},{:.8},{:.6}",
            iter + 1,
            breakdown.label,
            breakdown.bbox,
            breakdown.giou,
            breakdown.theta_mc,
            breakdown.theta_ms,
            breakdown.total
        )?;
        if (iter + 1) % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            csv.flush()?;
            loss_log.push((iter + 1, breakdown));
        }
        if (iter + 1) % cfg.checkpoint_every == 0 || iter + 1 == cfg.iterations {
            super::checkpoint::save_checkpoint(
                &out_dir.join("latest.ckpt"),
                &cfg.model,
                &model.ps,
                (iter + 1) as u64,
                Some(&opt),
                Some(&rng),
            )?;
        }
        last = breakdown;
    }
    csv.flush()?;
    Ok(TrainOutput { model, loss_log, final_loss: last })
}

/// Disk-backed entry point: loads the dataset directory named in the config.
pub fn train<F: Scalar>(cfg: &TrainConfig, resume_from: Option<&Path>) -> Result<TrainOutput<F>> {
    let ds = load_dataset::<F>(Path::new(&cfg.dataset_dir))?;
    train_with_samples(cfg, &ds.samples, resume_from)
}
