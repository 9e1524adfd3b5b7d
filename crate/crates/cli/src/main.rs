//! Command-line interface: dataset synthesis, training, inference,
//! evaluation, the polarimetric codec, and the corruption tools.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ndarray::Array2;

use rgbx_core::corruption::{apply as apply_corruption, CorruptionKind, CorruptionSpec};
use rgbx_core::detector::config::TrainConfig;
use rgbx_core::detector::dataset::{
    load_dataset, load_image_01, save_image_01, CocoDataset, PredRecord,
};
use rgbx_core::detector::eval::{evaluate, Detection, GtBox};
use rgbx_core::detector::infer::infer_sample;
use rgbx_core::detector::synth::{generate_dataset, SynthSpec};
use rgbx_core::detector::train::train;
use rgbx_core::detector::Model;
use rgbx_core::polar::{compute_stokes_params, encode_polar, PolarimetricRaw, DOLP_EPS};

#[derive(Parser)]
#[command(name = "rgbx", about = "Dual-modality diffusion detector toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality detection dataset.
    GenSynth {
        /// Generator spec JSON; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of images.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a detector from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run inference over a dataset directory and write predictions JSON.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory (annotations.json + images/).
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long, default_value = "predictions.json")]
        out: PathBuf,
        /// Refinement steps.
        #[arg(long)]
        steps: Option<usize>,
        /// DDIM stochasticity.
        #[arg(long)]
        eta: Option<f64>,
        /// Box-renewal score threshold between steps.
        #[arg(long)]
        renewal_threshold: Option<f64>,
        #[arg(long)]
        score_threshold: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write per-level channel attention and modality rates as CSV.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
        /// Write per-box aggregation weights as CSV.
        #[arg(long)]
        dump_dmlab_weights: Option<PathBuf>,
    },
    /// Evaluate predictions against COCO-style ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Encode four-angle polarimetric captures into three-channel images.
    EncodePolar {
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write (intensity, dolp, aolp) float binaries.
        #[arg(long)]
        dump_params: bool,
    },
    /// Apply a seeded corruption to every PNG in a directory.
    Corrupt {
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Repeatable key=value parameter overrides.
        #[arg(long = "param")]
        params: Vec<String>,
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenSynth { spec, n, out, seed } => gen_synth(spec, n, out, seed),
        Command::Train { config, resume } => run_train(config, resume),
        Command::Infer {
            ckpt,
            input,
            out,
            steps,
            eta,
            renewal_threshold,
            score_threshold,
            seed,
            dump_attention,
            dump_dmlab_weights,
        } => run_infer(
            ckpt,
            input,
            out,
            steps,
            eta,
            renewal_threshold,
            score_threshold,
            seed.unwrap_or(0),
            dump_attention,
            dump_dmlab_weights,
        ),
        Command::Eval { pred, gt } => run_eval(pred, gt),
        Command::EncodePolar { input, out, dump_params } => encode_polar_dir(input, out, dump_params),
        Command::Corrupt { kind, seed, params, input, out } => corrupt_dir(kind, seed, params, input, out),
    }
}

fn gen_synth(spec: Option<PathBuf>, n: usize, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut spec: SynthSpec = match spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = generate_dataset(&spec, n, &out)?;
    println!(
        "wrote {} images / {} annotations to {}",
        ds.images.len(),
        ds.annotations.len(),
        out.display()
    );
    Ok(())
}

fn run_train(config: PathBuf, resume: Option<PathBuf>) -> Result<()> {
    let cfg = TrainConfig::from_json_file(&config)?;
    println!(
        "training {:?} model for {} iterations (dataset {})",
        cfg.model.mode, cfg.iterations, cfg.dataset_dir
    );
    let out = train::<f32>(&cfg, resume.as_deref())?;
    println!(
        "done: final loss {:.4} (label {:.4} bbox {:.4} giou {:.4}); checkpoint at {}/latest.ckpt",
        out.final_loss.total,
        out.final_loss.label,
        out.final_loss.bbox,
        out.final_loss.giou,
        cfg.out_dir
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_infer(
    ckpt: PathBuf,
    input: PathBuf,
    out: PathBuf,
    steps: Option<usize>,
    eta: Option<f64>,
    renewal_threshold: Option<f64>,
    score_threshold: Option<f64>,
    seed: u64,
    dump_attention: Option<PathBuf>,
    dump_dmlab_weights: Option<PathBuf>,
) -> Result<()> {
    let (mut model, _) = Model::<f32>::load(&ckpt)?;
    if let Some(t) = score_threshold {
        model.cfg.score_threshold = t;
    }
    let mut sampler = model.cfg.sampler.clone();
    if let Some(s) = steps {
        sampler.num_steps = s;
    }
    if let Some(e) = eta {
        sampler.ddim_eta = e;
    }
    if let Some(r) = renewal_threshold {
        sampler.renewal_threshold = r;
    }
    let ds = load_dataset::<f32>(&input)?;
    let mut records = Vec::new();
    let mut attn_csv = String::from("level,channel_index,value\n");
    let mut dmlab_csv = String::from("image_id,box_index,level,weight\n");
    for s in &ds.samples {
        let r = infer_sample(&model, &s.rgb, s.aux.as_ref(), &sampler, seed ^ s.id)?;
        for d in &r.detections {
            records.push(PredRecord {
                image_id: s.id,
                category_id: ds.category_ids[d.class],
                bbox: [d.bbox[0], d.bbox[1], d.bbox[2] - d.bbox[0], d.bbox[3] - d.bbox[1]],
                score: d.score,
            });
        }
        for (level, (m_c, (rate_rgb, rate_x))) in r.diagnostics.attention.iter().enumerate() {
            for (ci, v) in m_c.iter().enumerate() {
                attn_csv.push_str(&format!("{level},{ci},{v}\n"));
            }
            attn_csv.push_str(&format!("{level},{rate_rgb},{rate_x}\n"));
        }
        if let Some(w) = &r.diagnostics.dmlab_weights {
            for (bi, row) in w.rows().into_iter().enumerate() {
                for (level, v) in row.iter().enumerate() {
                    dmlab_csv.push_str(&format!("{},{bi},{level},{v}\n", s.id));
                }
            }
        }
    }
    std::fs::write(&out, serde_json::to_string(&records)?)?;
    println!(
        "wrote {} detections over {} images to {}",
        records.len(),
        ds.samples.len(),
        out.display()
    );
    if let Some(p) = dump_attention {
        std::fs::write(&p, attn_csv)?;
        println!("attention dump at {}", p.display());
    }
    if let Some(p) = dump_dmlab_weights {
        std::fs::write(&p, dmlab_csv)?;
        println!("aggregation-weight dump at {}", p.display());
    }
    Ok(())
}

fn run_eval(pred: PathBuf, gt: PathBuf) -> Result<()> {
    let coco = CocoDataset::from_json_file(&gt)?;
    let preds: Vec<PredRecord> = serde_json::from_str(&std::fs::read_to_string(&pred)?)?;
    let mut cats: Vec<u64> = coco.categories.iter().map(|c| c.id).collect();
    cats.sort_unstable();
    let cat_to_class: HashMap<u64, usize> =
        cats.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let image_index: HashMap<u64, usize> =
        coco.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();

    let mut gts: Vec<Vec<GtBox>> = vec![vec![]; coco.images.len()];
    for a in &coco.annotations {
        let img = image_index[&a.image_id];
        gts[img].push(GtBox {
            bbox: [a.bbox[0], a.bbox[1], a.bbox[0] + a.bbox[2], a.bbox[1] + a.bbox[3]],
            class: cat_to_class[&a.category_id],
        });
    }
    let mut dets: Vec<Vec<Detection>> = vec![vec![]; coco.images.len()];
    for p in &preds {
        let Some(&img) = image_index.get(&p.image_id) else {
            bail!("prediction references unknown image {}", p.image_id);
        };
        let Some(&class) = cat_to_class.get(&p.category_id) else {
            bail!("prediction references unknown category {}", p.category_id);
        };
        dets[img].push(Detection {
            bbox: [p.bbox[0], p.bbox[1], p.bbox[0] + p.bbox[2], p.bbox[1] + p.bbox[3]],
            class,
            score: p.score,
        });
    }
    let r = evaluate(&dets, &gts);
    println!("AP50:95 = {:.2}", r.ap_50_95);
    println!("AP50    = {:.2}", r.ap_50);
    let name_of: HashMap<usize, &str> = coco
        .categories
        .iter()
        .map(|c| (cat_to_class[&c.id], c.name.as_str()))
        .collect();
    for (class, ap) in &r.per_class {
        println!("  {:<12} {:.2}", name_of.get(class).copied().unwrap_or("?"), ap);
    }
    Ok(())
}

/// Load a grayscale (8- or 16-bit) PNG as raw intensity counts.
fn load_gray_f64(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).with_context(|| format!("opening {}", path.display()))?;
    let l16 = img.to_luma16();
    let (w, h) = l16.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, p) in l16.enumerate_pixels() {
        out[[y as usize, x as usize]] = p[0] as f64;
    }
    Ok(out)
}

fn encode_polar_dir(input: PathBuf, out: PathBuf, dump_params: bool) -> Result<()> {
    std::fs::create_dir_all(&out)?;
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(&input)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(stem) = name.strip_suffix("_p0.png") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    if stems.is_empty() {
        bail!("no *_p0.png files found in {}", input.display());
    }
    for stem in &stems {
        let angle = |suffix: &str| load_gray_f64(&input.join(format!("{stem}_{suffix}.png")));
        let raw = PolarimetricRaw::new(angle("p0")?, angle("p45")?, angle("p90")?, angle("p135")?)?;
        let params = compute_stokes_params(&raw, DOLP_EPS);
        let enc = encode_polar(&params);
        // channels in [-1, 1] map to the full 16-bit range
        let (_, h, w) = enc.channels.dim();
        let mut img16 = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px: [u16; 3] = std::array::from_fn(|c| {
                    ((enc.channels[[c, y, x]].clamp(-1.0, 1.0) + 1.0) / 2.0 * 65535.0).round()
                        as u16
                });
                img16.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img16.save(out.join(format!("{stem}_encoded.png")))?;
        if dump_params {
            // "PLRP" magic, u32 h, u32 w, then intensity/dolp/aolp planes (f32 LE)
            let mut buf: Vec<u8> = Vec::with_capacity(16 + 12 * h * w);
            buf.extend_from_slice(b"PLRP");
            buf.extend_from_slice(&(h as u32).to_le_bytes());
            buf.extend_from_slice(&(w as u32).to_le_bytes());
            for plane in [&params.intensity, &params.dolp, &params.aolp] {
                for v in plane.iter() {
                    buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            std::fs::write(out.join(format!("{stem}_params.bin")), buf)?;
        }
    }
    println!("encoded {} capture(s) into {}", stems.len(), out.display());
    Ok(())
}

fn corrupt_dir(
    kind: String,
    seed: u64,
    params: Vec<String>,
    input: PathBuf,
    out: PathBuf,
) -> Result<()> {
    let kind = match kind.as_str() {
        "black_occlusion" => CorruptionKind::BlackOcclusion,
        "salt_pepper" => CorruptionKind::SaltPepper,
        "raindrop" => CorruptionKind::Raindrop,
        "depth_blur" => CorruptionKind::DepthBlur,
        other => bail!("unknown corruption kind: {other}"),
    };
    let mut spec = CorruptionSpec { kind, seed, ..Default::default() };
    for p in &params {
        let (k, v) = p
            .split_once('=')
            .with_context(|| format!("--param expects key=value, got {p}"))?;
        spec.set_param(k, v)?;
    }
    spec.validate()?;
    std::fs::create_dir_all(&out)?;
    // serialize the spec next to the outputs for reproducibility
    std::fs::write(out.join("corruption_spec.json"), serde_json::to_string_pretty(&spec)?)?;

    let mut count = 0usize;
    let mut names: Vec<String> = std::fs::read_dir(&input)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .filter(|n| n.ends_with(".png") && !n.ends_with("_depth.png"))
        .collect();
    names.sort();
    for name in names {
        let img = load_image_01::<f64>(&input.join(&name))?;
        // optional side-car depth map guides the depth-aware blur
        let depth_path = input.join(format!(
            "{}_depth.png",
            name.strip_suffix(".png").unwrap_or(&name)
        ));
        let depth = depth_path
            .exists()
            .then(|| load_gray_f64(&depth_path))
            .transpose()?
            .map(|d| {
                let max = d.iter().cloned().fold(f64::MIN, f64::max).max(1.0);
                d.mapv(|v| v / max)
            });
        let corrupted =
            apply_corruption(&img.view(), depth.as_ref().map(|d| d.view()).as_ref(), &spec);
        save_image_01(&corrupted, &out.join(&name))?;
        count += 1;
    }
    println!("corrupted {count} image(s) into {}", out.display());
    Ok(())
}
