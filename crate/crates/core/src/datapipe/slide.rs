use std::path::Path;

use super::{DataError, Result};

pub const DEFAULT_MICRONS_PER_PIXEL: f64 = 0.198;

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Slide {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub microns_per_pixel: f64,
}

impl Slide {
    pub fn new(id: impl Into<String>, width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(DataError::Invalid(format!(
                "{width}×{height} slide needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            width,
            height,
            pixels,
            microns_per_pixel: DEFAULT_MICRONS_PER_PIXEL,
        })
    }

    /// Uniformly colored slide.
    pub fn filled(id: impl Into<String>, width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            id: id.into(),
            width,
            height,
            pixels,
            microns_per_pixel: DEFAULT_MICRONS_PER_PIXEL,
        }
    }

    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_rgb(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Grayscale `(r+g+b)/3`, truncated.
    pub fn gray(&self) -> Vec<u8> {
        self.pixels
            .chunks_exact(3)
            .map(|p| ((p[0] as u16 + p[1] as u16 + p[2] as u16) / 3) as u8)
            .collect()
    }

    /// Load an 8-bit PNG, converting to RGB. The id is the file stem.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (w, h) = img.dimensions();
        Self::new(id, w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| DataError::Invalid("pixel buffer does not match extent".into()))?;
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}
