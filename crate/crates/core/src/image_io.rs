//! 8-bit RGB images and their conversion to and from pixel-space latents.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
/// Element count of a pixel-space latent (channel-major planes).
pub const LATENT_LEN: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major pixels.
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        self.pixels[y * self.width + x] = rgb;
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        let (w, h) = (self.width * factor, self.height * factor);
        let mut out = Self::filled(w, h, [0; 3]);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, self.get(x / factor, y / factor));
            }
        }
        out
    }

    pub fn to_latent(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut z = vec![0.0; CHANNELS * plane];
        for (i, px) in self.pixels.iter().enumerate() {
            for c in 0..CHANNELS {
                z[c * plane + i] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        z
    }

    /// Clamps to `[-1, 1]` and quantizes with `round((x + 1) / 2 · 255)`.
    pub fn from_latent(z: &[f64], width: usize, height: usize) -> Result<Self> {
        let plane = width * height;
        if z.len() != CHANNELS * plane {
            return Err(Error::Shape(format!(
                "latent of {} values for a {width}x{height} RGB image",
                z.len()
            )));
        }
        let quant = |x: f64| (((x.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8;
        let pixels = (0..plane)
            .map(|i| [quant(z[i]), quant(z[plane + i]), quant(z[2 * plane + i])])
            .collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for px in &self.pixels {
            out.extend_from_slice(px);
        }
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::Image("pixel buffer size".into()))?;
        let mut bytes = Vec::new();
        buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(bytes)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            pixels: img.pixels().map(|p| p.0).collect(),
        })
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Saves as PNG, or binary PPM when the extension is `.ppm`.
pub fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    let is_ppm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    let bytes = if is_ppm { img.to_ppm() } else { img.to_png()? };
    write_atomic(path, &bytes)
}
