use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape("image", &[height, width], &[pixels.len()]));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Quantizes to 8 bits, as stored on disk.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        GrayImage::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Reads an 8-bit grayscale PNG or portable graymap (format detected from content).
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let img = image::load_from_memory(&bytes).map_err(|e| Error::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        GrayImage::from_bytes(w as usize, h as usize, luma.as_raw())
    }

    /// Writes a PNG, or a binary PGM when the extension is `pgm`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_bytes())
            .expect("buffer length matches dimensions");
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("pgm") => image::ImageFormat::Pnm,
            _ => image::ImageFormat::Png,
        };
        if format == image::ImageFormat::Pnm {
            let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
            out.extend_from_slice(buf.as_raw());
            std::fs::write(path, out)?;
            return Ok(());
        }
        buf.save_with_format(path, format).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Image {
                path: path.display().to_string(),
                message: other.to_string(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..12).map(|v| (v * 20) as u8).collect();
        let img = GrayImage::from_bytes(4, 3, &bytes).unwrap();
        for name in ["a.png", "a.pgm"] {
            let p = dir.path().join(name);
            img.save(&p).unwrap();
            let back = GrayImage::load(&p).unwrap();
            assert_eq!(back, img, "{name}");
        }
    }

    #[test]
    fn garbage_is_an_image_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(matches!(GrayImage::load(&p), Err(Error::Image { .. })));
    }
}
