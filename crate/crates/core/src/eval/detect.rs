//! Connected-component detector for toy images.
//!
//! Background is the most common (coarsely quantized) border color. Pixels
//! far from it are foreground and are grouped by 4-connectivity. Each
//! component is classified by comparing its normalized central moments with
//! those of the four shape templates rendered over its bounding box, by a
//! majority vote over the palette for color, and by the fraction and row
//! phase of half-intensity pixels for texture.

use serde::{Deserialize, Serialize};

use crate::image_io::RgbImage;
use crate::toymodel::scene::{is_dark_stripe_row, shape_pixels, PixelRect};
use crate::toymodel::vocab::{Color, Shape, Texture};

/// Minimum RGB distance from the background for a foreground pixel.
pub const FOREGROUND_DISTANCE: f64 = 48.0;
pub const MIN_COMPONENT: usize = 6;
const STRIPE_FRACTION: (f64, f64) = (0.25, 0.75);
const STRIPE_PHASE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub shape: Shape,
    pub color: Color,
    pub texture: Texture,
    /// Half-open pixel bounding box.
    pub bbox: PixelRect,
    /// Centroid in pixel coordinates (pixel centers at `+0.5`).
    pub centroid: (f64, f64),
    pub area: usize,
}

impl Detection {
    /// Centroid in normalized image coordinates.
    pub fn centroid_normalized(&self, width: usize, height: usize) -> (f64, f64) {
        (self.centroid.0 / width as f64, self.centroid.1 / height as f64)
    }
}

fn dist(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Modal border color after 4-bit quantization, averaged within the mode.
pub fn estimate_background(img: &RgbImage) -> [u8; 3] {
    let (w, h) = (img.width, img.height);
    let mut border = Vec::with_capacity(2 * (w + h));
    for x in 0..w {
        border.push(img.get(x, 0));
        if h > 1 {
            border.push(img.get(x, h - 1));
        }
    }
    for y in 1..h.saturating_sub(1) {
        border.push(img.get(0, y));
        if w > 1 {
            border.push(img.get(w - 1, y));
        }
    }
    let key = |p: [u8; 3]| ((p[0] >> 4) as usize) << 8 | ((p[1] >> 4) as usize) << 4 | (p[2] >> 4) as usize;
    let mut counts = vec![0usize; 1 << 12];
    for &p in &border {
        counts[key(p)] += 1;
    }
    // Ties go to the lowest bin for determinism.
    let mode = (0..counts.len()).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap_or(0);
    let members: Vec<[u8; 3]> = border.into_iter().filter(|&p| key(p) == mode).collect();
    let n = members.len().max(1) as f64;
    let mut mean = [0.0; 3];
    for p in &members {
        for c in 0..3 {
            mean[c] += p[c] as f64 / n;
        }
    }
    mean.map(|v| v.round() as u8)
}

/// Nearest palette entry: `(color, is_dark_variant)`.
pub fn classify_pixel(p: [u8; 3]) -> (Color, bool) {
    let mut best = (Color::Red, false);
    let mut best_d = f64::INFINITY;
    for c in Color::ALL {
        for (dark, rgb) in [(false, c.rgb()), (true, c.dark_rgb())] {
            let d = dist(p, rgb);
            if d < best_d {
                best_d = d;
                best = (c, dark);
            }
        }
    }
    best
}

fn components(mask: &[bool], w: usize, h: usize) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut pix = Vec::new();
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            pix.push((x, y));
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        pix.sort_by_key(|&(x, y)| (y, x));
        out.push(pix);
    }
    out
}

/// Scale-normalized central moments `η_pq` for `2 ≤ p + q ≤ 4`, plus the
/// fill ratio of the bounding box.
fn descriptor(pixels: &[(usize, usize)], rect: &PixelRect) -> Vec<f64> {
    let n = pixels.len() as f64;
    if n == 0.0 {
        return vec![0.0; 13];
    }
    let (w, h) = (rect.width() as f64, rect.height() as f64);
    // Coordinates relative to the box, scaled to unit size so that stretched
    // shapes compare against equally stretched templates.
    let pts: Vec<(f64, f64)> = pixels
        .iter()
        .map(|&(x, y)| ((x as f64 + 0.5 - rect.x0 as f64) / w, (y as f64 + 0.5 - rect.y0 as f64) / h))
        .collect();
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut out = vec![n / (w * h)];
    for order in 2..=4 {
        for p in 0..=order {
            let q = order - p;
            let mu: f64 = pts.iter().map(|&(x, y)| (x - cx).powi(p) * (y - cy).powi(q as i32)).sum::<f64>() / n;
            out.push(mu * 10f64.powi(order));
        }
    }
    out
}

fn candidate_rects(b: &PixelRect, width: usize, height: usize) -> Vec<PixelRect> {
    let mut out = Vec::new();
    for l in 0..=1 {
        for r in 0..=1 {
            for t in 0..=1 {
                for d in 0..=1 {
                    if b.x0 < l || b.y0 < t || b.x1 + r > width || b.y1 + d > height {
                        continue;
                    }
                    out.push(PixelRect {
                        x0: b.x0 - l,
                        y0: b.y0 - t,
                        x1: b.x1 + r,
                        y1: b.y1 + d,
                    });
                }
            }
        }
    }
    out
}

fn classify_shape(pixels: &[(usize, usize)], bbox: &PixelRect, width: usize, height: usize) -> Shape {
    let own = descriptor(pixels, bbox);
    let mut best = (f64::INFINITY, Shape::Square);
    for rect in candidate_rects(bbox, width, height) {
        for shape in Shape::ALL {
            let tpl = shape_pixels(shape, &rect);
            if tpl.is_empty() {
                continue;
            }
            // Compare in the template's own tight box, like the component.
            let tb = tight_box(&tpl);
            let d: f64 = descriptor(&tpl, &tb)
                .iter()
                .zip(&own)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            if d < best.0 {
                best = (d, shape);
            }
        }
    }
    best.1
}

fn tight_box(pixels: &[(usize, usize)]) -> PixelRect {
    let x0 = pixels.iter().map(|p| p.0).min().unwrap_or(0);
    let y0 = pixels.iter().map(|p| p.1).min().unwrap_or(0);
    let x1 = pixels.iter().map(|p| p.0).max().unwrap_or(0) + 1;
    let y1 = pixels.iter().map(|p| p.1).max().unwrap_or(0) + 1;
    PixelRect { x0, y0, x1, y1 }
}

fn classify_color_texture(img: &RgbImage, pixels: &[(usize, usize)]) -> (Color, Texture) {
    let mut votes = [0usize; 6];
    let mut labels = Vec::with_capacity(pixels.len());
    for &(x, y) in pixels {
        let (c, dark) = classify_pixel(img.get(x, y));
        votes[c as usize] += 1;
        labels.push((y, dark));
    }
    let color = Color::ALL[(0..6).max_by_key(|&i| (votes[i], std::cmp::Reverse(i))).unwrap_or(0)];
    let n = labels.len() as f64;
    let dark_frac = labels.iter().filter(|l| l.1).count() as f64 / n;
    let agree = labels.iter().filter(|&&(y, dark)| dark == is_dark_stripe_row(y)).count() as f64 / n;
    let phase = 2.0 * agree - 1.0;
    let striped = (STRIPE_FRACTION.0..=STRIPE_FRACTION.1).contains(&dark_frac) && phase >= STRIPE_PHASE;
    (color, if striped { Texture::Striped } else { Texture::Solid })
}

pub fn detect_objects(img: &RgbImage) -> Vec<Detection> {
    let bg = estimate_background(img);
    let mask: Vec<bool> = img.pixels.iter().map(|&p| dist(p, bg) > FOREGROUND_DISTANCE).collect();
    let mut out = Vec::new();
    for pix in components(&mask, img.width, img.height) {
        if pix.len() < MIN_COMPONENT {
            continue;
        }
        let bbox = tight_box(&pix);
        let shape = classify_shape(&pix, &bbox, img.width, img.height);
        let (color, texture) = classify_color_texture(img, &pix);
        let n = pix.len() as f64;
        let centroid = (
            pix.iter().map(|p| p.0 as f64 + 0.5).sum::<f64>() / n,
            pix.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / n,
        );
        out.push(Detection {
            shape,
            color,
            texture,
            bbox,
            centroid,
            area: pix.len(),
        });
    }
    out
}
