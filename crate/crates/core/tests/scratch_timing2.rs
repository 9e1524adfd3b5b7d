use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rgbx_core::detector::config::{BackboneDepth, EncoderMode, ModelConfig};
use rgbx_core::detector::dataset::to_model_input;
use rgbx_core::detector::synth::{render_scene, Scene, SynthSpec};
use rgbx_core::detector::Model;
use rgbx_core::diffusion::SamplerConfig;
use rgbx_core::dmlab::ProposalBox;
use rgbx_core::losses::LossWeights;
use rgbx_core::nn::params::GradStore;
use ndarray::{Array1, Array2};

#[test]
fn stage_timing() {
    let cfg = ModelConfig {
        mode: EncoderMode::Fused,
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
        sampler: SamplerConfig::default(),
        loss: LossWeights::with_levels(4),
        focal_alpha: 0.25,
        focal_gamma: 2.0,
        exterior_penalty: false,
        score_threshold: 0.05,
        nms_iou: 0.5,
        seed: 0,
    };
    let model = Model::<f32>::build(&cfg).unwrap();
    let spec = SynthSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sc: Scene<f32> = render_scene(&spec, &mut rng);
    let rgb = to_model_input(&sc.rgb);
    let aux = to_model_input(&sc.aux);

    let reps = 6;
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let _ = model.encoder.forward(&model.ps, &rgb.view(), Some(&aux.view())).unwrap();
    }
    println!("encoder fwd: {:.0} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let (enc_out, enc_cache) = model.encoder.forward(&model.ps, &rgb.view(), Some(&aux.view())).unwrap();
    let boxes: Vec<ProposalBox> = (0..64).map(|i| ProposalBox {
        cx: 0.2 + 0.01 * (i as f64 % 40.0), cy: 0.5, w: 0.3, h: 0.3 }.clamped()).collect();
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let _ = model.decoder.forward_step(&model.ps, &enc_out.pyramid, &boxes, None, 500, true, (64, 64));
    }
    println!("decoder fwd (step0): {:.0} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let (dec_out, dec_cache) = model.decoder.forward_step(&model.ps, &enc_out.pyramid, &boxes, None, 500, true, (64, 64));
    let d_logits = Array2::<f32>::from_elem((64, 3), 0.01);
    let d_pred = Array2::<f64>::from_elem((64, 4), 0.01);
    let mut gs = GradStore::zeros_for(&model.ps);
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let _ = model.decoder.backward_step(&model.ps, &dec_cache, &d_logits.view(), &d_pred.view(), &mut gs);
    }
    println!("decoder bwd: {:.0} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let (d_pyr, _) = model.decoder.backward_step(&model.ps, &dec_cache, &d_logits.view(), &d_pred.view(), &mut gs);
    let d_mc: Vec<Array1<f32>> = enc_out.attn.iter().map(|(c, _)| c.mapv(|_| 0.01)).collect();
    let d_ms: Vec<Array2<f32>> = enc_out.attn.iter().map(|(_, s)| s.mapv(|_| 0.01)).collect();
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        model.encoder.backward(&model.ps, &enc_cache, &d_pyr, Some(&d_mc), Some(&d_ms), &mut gs);
    }
    println!("encoder bwd: {:.0} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    let _ = dec_out;
}
