//! Deterministic shape-on-texture images with one open and one yes/no question each.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::GrayImage;
use super::record::{save_dataset, VqaRecord};
use crate::error::{Error, Result};

pub const OPEN_QUESTION: &str = "What type of abnormality is present in this image?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Cross => "cross",
        }
    }

    /// Whether offset `(dx, dy)` from the center falls inside a shape of radius `r`.
    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

pub fn yes_no_question(shape: Shape) -> String {
    format!("Is there a {} present in this image?", shape.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_images: usize,
    /// Texture families; each acts as one modality.
    pub modalities: Vec<String>,
    pub shapes: Vec<Shape>,
    pub noise_seed: u64,
    pub image_size: usize,
    /// Emit open questions in multiple-choice form (options `A`, `B`, ... over
    /// the shape names, ground truth a key), as raw benchmark data arrives.
    pub multiple_choice: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_images: 48,
            modalities: vec!["ct-like".into(), "mri-like".into(), "xray-like".into()],
            shapes: Shape::ALL.to_vec(),
            noise_seed: 0,
            image_size: 32,
            multiple_choice: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<VqaRecord>,
    /// `(image_path, image)` in record order.
    pub images: Vec<(String, GrayImage)>,
}

impl SyntheticCorpus {
    /// Writes `dataset.json` and every image under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (path, img) in &self.images {
            let full = dir.join(path);
            if let Some(parent) = full.parent() {
                std::fs::create_dir_all(parent)?;
            }
            img.save(&full)?;
        }
        save_dataset(&dir.join("dataset.json"), &self.records)
    }
}

/// Background intensity for texture family `family` at pixel `(x, y)`.
fn texture(family: usize, x: usize, y: usize, size: usize, rng: &mut ChaCha8Rng) -> f64 {
    let s = size as f64;
    let (fx, fy) = (x as f64 / s, y as f64 / s);
    let base = match family % 3 {
        // smooth radial falloff
        0 => {
            let d = ((fx - 0.5).powi(2) + (fy - 0.5).powi(2)).sqrt();
            0.35 - 0.3 * d
        }
        // horizontal banding
        1 => 0.2 + 0.1 * (std::f64::consts::PI * 6.0 * fy).sin(),
        // speckle
        _ => 0.15 + 0.2 * rng.random::<f64>(),
    };
    // families beyond the first three shift brightness
    base + 0.05 * (family / 3) as f64
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if spec.modalities.is_empty() || spec.shapes.is_empty() || spec.image_size < 8 {
        return Err(Error::Config(
            "synthetic spec needs modalities, shapes and image_size >= 8".into(),
        ));
    }
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let mut records = Vec::with_capacity(2 * spec.num_images);
    let mut images = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let shape = spec.shapes[i % spec.shapes.len()];
        let family = (i / spec.shapes.len()) % spec.modalities.len();
        let modality = &spec.modalities[family];

        let s = size as f64;
        let cx = s * rng.random_range(0.38..0.62);
        let cy = s * rng.random_range(0.38..0.62);
        let r = s * rng.random_range(0.2..0.28);
        let mut img = GrayImage::filled(size, size, 0.0);
        for y in 0..size {
            for x in 0..size {
                let bg = texture(family, x, y, size, &mut rng);
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let v = if shape.covers(dx, dy, r) { 0.9 } else { bg };
                let noise = 0.03 * (rng.random::<f64>() - 0.5);
                img.set(x, y, (v + noise).clamp(0.0, 1.0));
            }
        }
        // Match what a reader of the 8-bit file will see.
        let img = GrayImage::from_bytes(size, size, &img.to_bytes())?;

        let image_path = format!("images/img{i:05}.png");
        let mut open =
            VqaRecord::new(format!("img{i:05}-open"), &image_path, OPEN_QUESTION, shape.name()).with_modality(modality);
        if spec.multiple_choice {
            let keys: Vec<String> = (0..spec.shapes.len())
                .map(|k| ((b'A' + k as u8) as char).to_string())
                .collect();
            let pos = spec
                .shapes
                .iter()
                .position(|&s| s == shape)
                .expect("shape drawn from spec");
            open.gt_answer = keys[pos].clone();
            open = open.with_options(keys.iter().cloned().zip(spec.shapes.iter().map(|s| s.name())));
        }
        records.push(open);
        let asked = if spec.shapes.len() == 1 || rng.random_bool(0.5) {
            shape
        } else {
            let others: Vec<Shape> = spec.shapes.iter().copied().filter(|&s| s != shape).collect();
            others[rng.random_range(0..others.len())]
        };
        let answer = if asked == shape { "yes" } else { "no" };
        records.push(
            VqaRecord::new(format!("img{i:05}-yesno"), &image_path, yes_no_question(asked), answer)
                .with_modality(modality),
        );
        images.push((image_path, img));
    }
    Ok(SyntheticCorpus { records, images })
}
