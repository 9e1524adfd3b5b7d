//! Synthetic two-modality detection scenes.
//!
//! Three classes on a noisy canvas: a disc that is distinctive in both
//! modalities, and two squares that are pixel-identical in RGB but sit at
//! opposite intensities in the auxiliary channel. Any detector that cannot
//! read the auxiliary modality can localize the squares but must guess
//! between the two square classes.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::polar::ir_to_rgb;
use crate::scalar::Scalar;

use super::dataset::{save_image_01, CocoAnnotation, CocoCategory, CocoDataset, CocoImage};

pub const CLASS_NAMES: [&str; 3] = ["disc", "box_hot", "box_cold"];

/// Scene generator parameters; identical spec + seed reproduce the dataset
/// byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side / diameter range in pixels.
    pub size_min: usize,
    pub size_max: usize,
    /// Per-pixel Gaussian noise in both modalities.
    pub noise: f64,
    /// Uniform per-object brightness jitter (applied equally to all RGB
    /// channels, so it never separates the square classes).
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            canvas: 64,
            min_objects: 2,
            max_objects: 5,
            size_min: 12,
            size_max: 26,
            noise: 0.02,
            jitter: 0.05,
            seed: 0,
        }
    }
}

/// One rendered scene plus its annotations (normalized boxes, class indexes).
pub struct Scene<F> {
    pub rgb: Array3<F>,
    pub aux: Array3<F>,
    pub boxes: Vec<([f64; 4], usize)>,
}

fn boxes_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let iy = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

/// Render one scene. Boxes come back as (x, y, w, h) in pixels.
pub fn render_scene<F: Scalar>(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Scene<F> {
    let s = spec.canvas;
    let mut rgb = Array3::<f64>::from_elem((3, s, s), 0.25);
    let mut aux = Array2::<f64>::from_elem((s, s), 0.45);

    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<[f64; 4]> = Vec::new();
    let mut boxes = Vec::new();
    for _ in 0..count {
        let class = rng.random_range(0..CLASS_NAMES.len());
        let size = rng.random_range(spec.size_min..=spec.size_max.min(s - 4));
        let mut found = None;
        for _try in 0..50 {
            let x0 = rng.random_range(1..s - size - 1);
            let y0 = rng.random_range(1..s - size - 1);
            let cand = [x0 as f64, y0 as f64, size as f64, size as f64];
            if placed.iter().all(|p| boxes_iou(p, &cand) < 0.1) {
                found = Some((x0, y0));
                break;
            }
        }
        let Some((x0, y0)) = found else { continue };
        let bbox = [x0 as f64, y0 as f64, size as f64, size as f64];
        placed.push(bbox);

        let jit = f64::uniform(rng, -spec.jitter, spec.jitter);
        let (rgb_color, aux_val) = match class {
            0 => ([0.68 + jit, 0.72 + jit, 0.88 + jit], 0.75),
            1 => ([0.55 + jit, 0.55 + jit, 0.55 + jit], 0.90),
            _ => ([0.55 + jit, 0.55 + jit, 0.55 + jit], 0.12),
        };
        let radius = size as f64 / 2.0;
        let (cy, cx) = (y0 as f64 + radius, x0 as f64 + radius);
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                let inside = if class == 0 {
                    let dy = y as f64 + 0.5 - cy;
                    let dx = x as f64 + 0.5 - cx;
                    dy * dy + dx * dx <= radius * radius
                } else {
                    true
                };
                if inside {
                    for c in 0..3 {
                        rgb[[c, y, x]] = rgb_color[c];
                    }
                    aux[[y, x]] = aux_val;
                }
            }
        }
        boxes.push((bbox, class));
    }

    // per-pixel noise, then quantization-friendly clamping
    for v in rgb.iter_mut() {
        *v = (*v + spec.noise * f64::standard_normal(rng)).clamp(0.0, 1.0);
    }
    for v in aux.iter_mut() {
        *v = (*v + spec.noise * f64::standard_normal(rng)).clamp(0.0, 1.0);
    }
    let aux3 = ir_to_rgb(&aux.view());
    Scene {
        rgb: rgb.mapv(F::from_f64),
        aux: aux3.mapv(F::from_f64),
        boxes,
    }
}

/// Generate `n_images` scenes under `out_dir` (images/ + annotations.json).
pub fn generate_dataset(spec: &SynthSpec, n_images: usize, out_dir: &Path) -> Result<CocoDataset> {
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = Vec::with_capacity(n_images);
    let mut annotations = Vec::new();
    let mut ann_id = 1u64;
    for idx in 0..n_images {
        let scene: Scene<f64> = render_scene(spec, &mut rng);
        let rgb_name = format!("{idx:06}_rgb.png");
        let aux_name = format!("{idx:06}_x.png");
        save_image_01(&scene.rgb, &images_dir.join(&rgb_name))?;
        save_image_01(&scene.aux, &images_dir.join(&aux_name))?;
        let image_id = idx as u64 + 1;
        images.push(CocoImage {
            id: image_id,
            file_name: rgb_name,
            width: spec.canvas as u32,
            height: spec.canvas as u32,
            aux_file_name: Some(aux_name),
        });
        for (bbox, class) in &scene.boxes {
            annotations.push(CocoAnnotation {
                id: ann_id,
                image_id,
                category_id: *class as u64 + 1,
                bbox: *bbox,
                area: bbox[2] * bbox[3],
                iscrowd: 0,
            });
            ann_id += 1;
        }
    }
    let dataset = CocoDataset {
        images,
        annotations,
        categories: CLASS_NAMES
            .iter()
            .enumerate()
            .map(|(i, &name)| CocoCategory { id: i as u64 + 1, name: name.into() })
            .collect(),
    };
    dataset.write_json_file(&out_dir.join("annotations.json"))?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_given_seed() {
        let spec = SynthSpec::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a: Scene<f64> = render_scene(&spec, &mut r1);
        let b: Scene<f64> = render_scene(&spec, &mut r2);
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.aux, b.aux);
        assert_eq!(a.boxes, b.boxes);
    }

    #[test]
    fn boxes_stay_inside_canvas() {
        let spec = SynthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s: Scene<f64> = render_scene(&spec, &mut rng);
            for (b, _) in &s.boxes {
                assert!(b[0] >= 0.0 && b[1] >= 0.0);
                assert!(b[0] + b[2] <= spec.canvas as f64);
                assert!(b[1] + b[3] <= spec.canvas as f64);
            }
        }
    }

    #[test]
    fn square_classes_identical_in_rgb_but_distinct_in_aux() {
        // render single-object scenes of each square class with the same
        // geometry seed path by probing class colors directly
        let spec = SynthSpec { noise: 0.0, jitter: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut hot_rgb = None;
        let mut cold_rgb = None;
        let mut hot_aux = None;
        let mut cold_aux = None;
        for _ in 0..200 {
            let s: Scene<f64> = render_scene(&spec, &mut rng);
            for (b, class) in &s.boxes {
                let (cx, cy) = ((b[0] + b[2] / 2.0) as usize, (b[1] + b[3] / 2.0) as usize);
                match class {
                    1 => {
                        hot_rgb = Some(s.rgb[[0, cy, cx]]);
                        hot_aux = Some(s.aux[[0, cy, cx]]);
                    }
                    2 => {
                        cold_rgb = Some(s.rgb[[0, cy, cx]]);
                        cold_aux = Some(s.aux[[0, cy, cx]]);
                    }
                    _ => {}
                }
            }
            if hot_rgb.is_some() && cold_rgb.is_some() {
                break;
            }
        }
        assert_eq!(hot_rgb.unwrap(), cold_rgb.unwrap());
        assert!((hot_aux.unwrap() - cold_aux.unwrap()).abs() > 0.5);
    }

    #[test]
    fn class_balance_near_uniform_over_many_scenes() {
        let spec = SynthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 3];
        for _ in 0..500 {
            let s: Scene<f64> = render_scene(&spec, &mut rng);
            for (_, class) in &s.boxes {
                counts[*class] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for &c in &counts {
            let frac = c as f64 / total as f64;
            assert!((frac - 1.0 / 3.0).abs() < 0.1 / 3.0 + 0.033, "imbalanced: {counts:?}");
        }
    }

    #[test]
    fn dataset_generation_writes_consistent_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { seed: 11, ..Default::default() };
        let ds = generate_dataset(&spec, 4, dir.path()).unwrap();
        assert_eq!(ds.images.len(), 4);
        assert!(!ds.annotations.is_empty());
        let loaded = super::super::dataset::load_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(loaded.samples.len(), 4);
        assert_eq!(loaded.class_names, CLASS_NAMES);
        for s in &loaded.samples {
            assert!(s.aux.is_some());
            for g in &s.gts {
                assert!(g.cx > 0.0 && g.cx < 1.0 && g.w > 0.0 && g.w < 1.0);
            }
        }

        // identical spec regenerates identical bytes
        let dir2 = tempfile::tempdir().unwrap();
        generate_dataset(&spec, 4, dir2.path()).unwrap();
        let a = std::fs::read(dir.path().join("images/000002_rgb.png")).unwrap();
        let b = std::fs::read(dir2.path().join("images/000002_rgb.png")).unwrap();
        assert_eq!(a, b);
    }
}
