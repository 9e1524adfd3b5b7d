use rayon::prelude::*;
use rgbx_core::detector::config::{BackboneDepth, EncoderMode, ModelConfig, TrainConfig};
use rgbx_core::detector::dataset::{load_dataset, Sample};
use rgbx_core::detector::eval::{evaluate, GtBox};
use rgbx_core::detector::infer::infer_sample;
use rgbx_core::detector::synth::{generate_dataset, SynthSpec};
use rgbx_core::detector::train::train_with_samples;
use rgbx_core::detector::Model;
use rgbx_core::diffusion::SamplerConfig;
use rgbx_core::losses::LossWeights;
use rgbx_core::nn::adamw::AdamWConfig;

fn accept_model(mode: EncoderMode, seed: u64) -> ModelConfig {
    ModelConfig {
        mode,
        backbone: BackboneDepth::Tiny,
        stage_widths: [16, 32, 64, 96],
        branch_width: 128,
        c_prime: 256,
        reduction: 16,
        spatial_kernel: 7,
        num_proposals: 64,
        num_classes: 3,
        d_model: 128,
        time_dim: 64,
        t_max: 1000,
        image_size: 64,
        sampler: SamplerConfig { num_steps: 1, ..Default::default() },
        loss: LossWeights::with_levels(4),
        focal_alpha: 0.25,
        focal_gamma: 2.0,
        exterior_penalty: false,
        score_threshold: 0.05,
        nms_iou: 0.5,
        seed,
    }
}

fn eval_model(model: &Model<f32>, test: &[Sample<f32>], steps: usize) -> (f64, f64) {
    let sampler = SamplerConfig { num_steps: steps, ..Default::default() };
    let results: Vec<_> = test
        .par_iter()
        .map(|s| infer_sample(model, &s.rgb, s.aux.as_ref(), &sampler, 1000 + s.id).unwrap().detections)
        .collect();
    let gts: Vec<Vec<GtBox>> = test
        .iter()
        .map(|s| {
            s.gts
                .iter()
                .map(|g| GtBox {
                    bbox: [
                        (g.cx - g.w / 2.0) * 64.0,
                        (g.cy - g.h / 2.0) * 64.0,
                        (g.cx + g.w / 2.0) * 64.0,
                        (g.cy + g.h / 2.0) * 64.0,
                    ],
                    class: g.class,
                })
                .collect()
        })
        .collect();
    let r = evaluate(&results, &gts);
    (r.ap_50, r.ap_50_95)
}

#[test]
fn learning_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    let test_dir = dir.path().join("test");
    generate_dataset(&SynthSpec { seed: 100, ..Default::default() }, 400, &train_dir).unwrap();
    generate_dataset(&SynthSpec { seed: 200, ..Default::default() }, 100, &test_dir).unwrap();
    let train_ds = load_dataset::<f32>(&train_dir).unwrap();
    let test_ds = load_dataset::<f32>(&test_dir).unwrap();

    for mode in [EncoderMode::Fused, EncoderMode::RgbOnly] {
        let t0 = std::time::Instant::now();
        let cfg = TrainConfig {
            model: accept_model(mode, 0),
            dataset_dir: String::new(),
            iterations: 600,
            batch_size: 4,
            optimizer: AdamWConfig { lr: 3e-4, ..Default::default() },
            warmup_iters: 60,
            out_dir: dir.path().join(format!("run_{mode:?}")).to_string_lossy().into_owned(),
            checkpoint_every: 100000,
            log_every: 100,
        };
        let out = train_with_samples(&cfg, &train_ds.samples, None).unwrap();
        let train_time = t0.elapsed().as_secs_f64();
        let (ap50, ap5095) = eval_model(&out.model, &test_ds.samples, 1);
        println!(
            "{mode:?}: train {:.0}s, AP50 {:.1}, AP50:95 {:.1}, final loss {:.3}",
            train_time, ap50, ap5095, out.final_loss.total
        );
        for (it, b) in &out.loss_log {
            println!("  iter {it}: total {:.3} label {:.3} bbox {:.3} giou {:.3}", b.total, b.label, b.bbox, b.giou);
        }
    }
}
