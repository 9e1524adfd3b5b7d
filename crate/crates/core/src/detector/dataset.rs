//! COCO-style annotation schema and in-memory dataset loading.
//!
//! Dual-modality datasets carry an `aux_file_name` per image record; plain
//! COCO files (RGB-only) load fine without it.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    /// Auxiliary modality image (depth/IR/encoded polarimetric), if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_file_name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// (x, y, w, h) in pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_json_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

/// One detection in the prediction-file schema (COCO results format).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Ground-truth object in normalized center format with a zero-based class.
#[derive(Debug, Clone, Copy)]
pub struct GtObject {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Fully loaded sample; images are [3, H, W] in [0, 1].
#[derive(Debug, Clone)]
pub struct Sample<F> {
    pub id: u64,
    pub rgb: Array3<F>,
    pub aux: Option<Array3<F>>,
    pub gts: Vec<GtObject>,
    pub width: usize,
    pub height: usize,
}

/// Load a PNG as [3, H, W] scaled to [0, 1]; grayscale inputs are
/// replicated across channels.
pub fn load_image_01<F: Scalar>(path: &Path) -> Result<Array3<F>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = F::from_f64(p[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Save a [3, H, W] image in [0, 1] as an 8-bit PNG.
pub fn save_image_01<F: Scalar>(img: &Array3<F>, path: &Path) -> Result<()> {
    let (_, h, w) = img.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|c| {
                (img[[c, y, x]].into_f64().clamp(0.0, 1.0) * 255.0).round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Shift a [0, 1] image into the zero-centered range the encoders consume.
pub fn to_model_input<F: Scalar>(img: &Array3<F>) -> Array3<F> {
    img.mapv(|v| v - F::from_f64(0.5))
}

/// Dataset directory layout: `annotations.json` + `images/`.
pub struct LoadedDataset<F> {
    pub samples: Vec<Sample<F>>,
    /// Class names ordered by zero-based class index.
    pub class_names: Vec<String>,
    /// category_id per class index (for writing predictions).
    pub category_ids: Vec<u64>,
}

pub fn load_dataset<F: Scalar>(dir: &Path) -> Result<LoadedDataset<F>> {
    let coco = CocoDataset::from_json_file(&dir.join("annotations.json"))?;
    let mut categories = coco.categories.clone();
    categories.sort_by_key(|c| c.id);
    let cat_to_class: HashMap<u64, usize> =
        categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let mut by_image: HashMap<u64, Vec<GtObject>> = HashMap::new();
    for ann in &coco.annotations {
        let class = *cat_to_class.get(&ann.category_id).ok_or_else(|| {
            Error::InvalidInput(format!("annotation references unknown category {}", ann.category_id))
        })?;
        let img = coco
            .images
            .iter()
            .find(|im| im.id == ann.image_id)
            .ok_or_else(|| Error::InvalidInput(format!("annotation references unknown image {}", ann.image_id)))?;
        let (iw, ih) = (img.width as f64, img.height as f64);
        by_image.entry(ann.image_id).or_default().push(GtObject {
            class,
            cx: (ann.bbox[0] + ann.bbox[2] / 2.0) / iw,
            cy: (ann.bbox[1] + ann.bbox[3] / 2.0) / ih,
            w: ann.bbox[2] / iw,
            h: ann.bbox[3] / ih,
        });
    }
    let images_dir = dir.join("images");
    let mut samples = Vec::with_capacity(coco.images.len());
    for im in &coco.images {
        let rgb = load_image_01(&images_dir.join(&im.file_name))?;
        let aux = match &im.aux_file_name {
            Some(f) => Some(load_image_01(&images_dir.join(f))?),
            None => None,
        };
        samples.push(Sample {
            id: im.id,
            rgb,
            aux,
            gts: by_image.remove(&im.id).unwrap_or_default(),
            width: im.width as usize,
            height: im.height as usize,
        });
    }
    Ok(LoadedDataset {
        samples,
        class_names: categories.iter().map(|c| c.name.clone()).collect(),
        category_ids: categories.iter().map(|c| c.id).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coco_roundtrip_and_class_mapping() {
        let ds = CocoDataset {
            images: vec![CocoImage {
                id: 7,
                file_name: "a.png".into(),
                width: 64,
                height: 32,
                aux_file_name: Some("a_x.png".into()),
            }],
            annotations: vec![CocoAnnotation {
                id: 1,
                image_id: 7,
                category_id: 30,
                bbox: [16.0, 8.0, 32.0, 16.0],
                area: 512.0,
                iscrowd: 0,
            }],
            categories: vec![
                CocoCategory { id: 30, name: "b".into() },
                CocoCategory { id: 10, name: "a".into() },
            ],
        };
        let json = serde_json::to_string(&ds).unwrap();
        let back: CocoDataset = serde_json::from_str(&json).unwrap();
        assert_eq!(back.images[0].aux_file_name.as_deref(), Some("a_x.png"));
        assert_eq!(back.annotations[0].bbox, [16.0, 8.0, 32.0, 16.0]);
    }

    #[test]
    fn image_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = Array3::from_shape_fn((3, 5, 4), |(c, y, x)| {
            ((c * 47 + y * 13 + x * 7) % 256) as f64 / 255.0
        });
        save_image_01(&img, &path).unwrap();
        let back: Array3<f64> = load_image_01(&path).unwrap();
        for (a, b) in back.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1.0 / 254.0);
        }
    }
}
