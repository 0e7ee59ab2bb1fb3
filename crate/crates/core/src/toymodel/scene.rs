//! Procedural scenes of flat shapes, their captions and their layouts.

use serde::{Deserialize, Serialize};

use super::vocab::{Color, Shape, Texture, Vocabulary, BOS, SEP};
use crate::error::{Error, Result};
use crate::image_io::{RgbImage, IMAGE_SIZE};
use crate::layout::{BBox, LayoutSpec, SubjectBinding};
use crate::rng::SeededRng;

pub const BACKGROUNDS: [[u8; 3]; 2] = [[0, 0, 0], [40, 40, 40]];
pub const MIN_SIDE: usize = 8;
pub const MAX_SIDE: usize = 16;
pub const REJECTION_BUDGET: usize = 1000;
const RESTART_AFTER: usize = 50;

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    /// True when the rectangles overlap or are closer than `gap` pixels.
    pub fn near(&self, other: &PixelRect, gap: usize) -> bool {
        self.x0 < other.x1 + gap
            && other.x0 < self.x1 + gap
            && self.y0 < other.y1 + gap
            && other.y0 < self.y1 + gap
    }

    pub fn to_bbox(&self, size: usize) -> BBox {
        let s = size as f64;
        BBox::new(
            self.x0 as f64 / s,
            self.y0 as f64 / s,
            self.x1 as f64 / s,
            self.y1 as f64 / s,
        )
        .expect("pixel rect inside the image")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub texture: Texture,
    pub rect: PixelRect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub background: [u8; 3],
}

/// Options for [`sample_scene_with`].
#[derive(Debug, Clone, Copy)]
pub struct SceneSampling {
    /// Relative weights for 1, 2 and 3 objects.
    pub count_weights: [f64; 3],
    /// No two objects share a shape or a color.
    pub distinct: bool,
    /// Minimum empty pixels between boxes.
    pub gap: usize,
}

impl Default for SceneSampling {
    fn default() -> Self {
        Self {
            count_weights: [1.0, 1.0, 1.0],
            distinct: false,
            gap: 1,
        }
    }
}

/// Samples a training scene and its caption.
pub fn sample_scene(rng: &mut SeededRng) -> Result<(SceneSpec, Vec<usize>)> {
    sample_scene_with(rng, &SceneSampling::default())
}

fn weighted_index(rng: &mut SeededRng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

pub fn sample_scene_with(rng: &mut SeededRng, opts: &SceneSampling) -> Result<(SceneSpec, Vec<usize>)> {
    let count = 1 + weighted_index(rng, &opts.count_weights);
    let background = BACKGROUNDS[rng.below(BACKGROUNDS.len())];
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let mut attempts = 0;
    let mut misses = 0;
    while objects.len() < count {
        attempts += 1;
        if attempts > REJECTION_BUDGET {
            return Err(Error::RejectionBudget(REJECTION_BUDGET));
        }
        // Earlier boxes can leave no room; start the placement over.
        if misses == RESTART_AFTER {
            objects.clear();
            misses = 0;
        }
        let shape = Shape::ALL[rng.below(Shape::ALL.len())];
        let color = Color::ALL[rng.below(Color::ALL.len())];
        let texture = Texture::ALL[rng.below(Texture::ALL.len())];
        let w = MIN_SIDE + rng.below(MAX_SIDE - MIN_SIDE + 1);
        let h = MIN_SIDE + rng.below(MAX_SIDE - MIN_SIDE + 1);
        let x0 = rng.below(IMAGE_SIZE - w + 1);
        let y0 = rng.below(IMAGE_SIZE - h + 1);
        let rect = PixelRect {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        };
        let clash = objects.iter().any(|o| {
            o.rect.near(&rect, opts.gap) || (opts.distinct && (o.shape == shape || o.color == color))
        });
        if clash {
            misses += 1;
        } else {
            misses = 0;
            objects.push(SceneObject {
                shape,
                color,
                texture,
                rect,
            });
        }
    }
    let spec = SceneSpec { objects, background };
    let caption = caption(&spec);
    Ok((spec, caption))
}

/// `BOS` + `[color, texture, shape]` per object + `SEP`.
pub fn caption(spec: &SceneSpec) -> Vec<usize> {
    let mut out = vec![BOS];
    for o in &spec.objects {
        out.extend([o.color.token(), o.texture.token(), o.shape.token()]);
    }
    out.push(SEP);
    out
}

/// Binds each shape token to its box, with the color and texture tokens as
/// attributes.
pub fn scene_layout(spec: &SceneSpec) -> Result<LayoutSpec> {
    let vocab = Vocabulary::default();
    let words = vocab.decode(&caption(spec))?;
    let bindings = spec
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let base = 1 + 3 * i;
            SubjectBinding {
                subject_tokens: vec![base + 2],
                bbox: o.rect.to_bbox(IMAGE_SIZE),
                attribute_tokens: vec![base, base + 1],
            }
        })
        .collect();
    Ok(LayoutSpec::new(words, bindings)?)
}

/// Shape membership in box-relative coordinates `u, v ∈ [0, 1]` (v down).
pub fn shape_contains(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Square => true,
        Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        Shape::Triangle => (u - 0.5).abs() <= v / 2.0,
        Shape::Cross => (u - 0.5).abs() <= 1.0 / 6.0 || (v - 0.5).abs() <= 1.0 / 6.0,
    }
}

/// Stripe bands are two rows tall, counted from the top of the image.
pub fn is_dark_stripe_row(y: usize) -> bool {
    (y >> 1) & 1 == 1
}

/// Pixels of `shape` rasterized into `rect` by pixel-center sampling.
pub fn shape_pixels(shape: Shape, rect: &PixelRect) -> Vec<(usize, usize)> {
    let (w, h) = (rect.width() as f64, rect.height() as f64);
    let mut out = Vec::new();
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let u = (x - rect.x0) as f64 / w + 0.5 / w;
            let v = (y - rect.y0) as f64 / h + 0.5 / h;
            if shape_contains(shape, u, v) {
                out.push((x, y));
            }
        }
    }
    out
}

pub fn render_scene(spec: &SceneSpec) -> RgbImage {
    let mut img = RgbImage::filled(IMAGE_SIZE, IMAGE_SIZE, spec.background);
    for o in &spec.objects {
        for (x, y) in shape_pixels(o.shape, &o.rect) {
            let rgb = match o.texture {
                Texture::Striped if is_dark_stripe_row(y) => o.color.dark_rgb(),
                _ => o.color.rgb(),
            };
            img.set(x, y, rgb);
        }
    }
    img
}
