//! Captured attention maps and the reductions the guidance losses read.
//!
//! An [`AttentionBundle`] holds every (block, head) cross-attention map
//! (`hw × n`, rows over latent cells, columns over prompt tokens) and
//! self-attention map (`hw × hw`) of one denoiser forward pass. Aggregation is
//! an unweighted mean over all captured maps. Each reduction has an adjoint
//! that scatters an upstream gradient back onto the bundle, which is how the
//! guidance loop differentiates losses through the maps.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layout::{rasterize_mask, BBox, BinaryMask};

/// Patch sums below this are treated as carrying no mass.
pub const EPS_NORM: f64 = 1e-8;

const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct AttentionBundle {
    pub h: usize,
    pub w: usize,
    pub n_tokens: usize,
    pub timestep: usize,
    /// Row-major `hw × n_tokens` maps, one per (block, head).
    pub cross: Vec<Vec<f64>>,
    /// Row-major `hw × hw` maps, one per (block, head).
    pub self_attn: Vec<Vec<f64>>,
}

impl AttentionBundle {
    /// Builds a bundle after checking shapes and row-stochasticity.
    pub fn new(
        h: usize,
        w: usize,
        n_tokens: usize,
        timestep: usize,
        cross: Vec<Vec<f64>>,
        self_attn: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let hw = h * w;
        for (i, m) in cross.iter().enumerate() {
            check_stochastic(m, hw, n_tokens, &format!("cross map {i}"))?;
        }
        for (i, m) in self_attn.iter().enumerate() {
            check_stochastic(m, hw, hw, &format!("self map {i}"))?;
        }
        Ok(Self {
            h,
            w,
            n_tokens,
            timestep,
            cross,
            self_attn,
        })
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

fn check_stochastic(m: &[f64], rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{what}: expected {rows}x{cols}, got {} entries",
            m.len()
        )));
    }
    for (r, row) in m.chunks(cols).enumerate() {
        if row.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Invalid(format!("{what}: negative or non-finite entry in row {r}")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Invalid(format!("{what}: row {r} sums to {s}")));
        }
    }
    Ok(())
}

/// One `hw` vector over latent cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregatedMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

/// Box-restricted, renormalized attention: a distribution over the box's
/// cells (listed in `cells` as flat indices into the map).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDistribution {
    pub cells: Vec<usize>,
    pub values: Vec<f64>,
    /// Raw patch mass before normalization.
    pub mass: f64,
    /// True when the mass was below [`EPS_NORM`] and the uniform fallback was used.
    pub fallback: bool,
}

/// Upstream gradients with the same layout as an [`AttentionBundle`].
#[derive(Debug, Clone, PartialEq)]
pub struct BundleGrad {
    pub cross: Vec<Vec<f64>>,
    pub self_attn: Vec<Vec<f64>>,
}

impl BundleGrad {
    pub fn zeros_like(bundle: &AttentionBundle) -> Self {
        Self {
            cross: bundle.cross.iter().map(|m| vec![0.0; m.len()]).collect(),
            self_attn: bundle.self_attn.iter().map(|m| vec![0.0; m.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.cross.iter_mut().chain(self.self_attn.iter_mut()) {
            m.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &BundleGrad, s: f64) {
        for (a, b) in self
            .cross
            .iter_mut()
            .zip(&other.cross)
            .chain(self.self_attn.iter_mut().zip(&other.self_attn))
        {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.cross
            .iter()
            .chain(&self.self_attn)
            .all(|m| m.iter().all(|&x| x == 0.0))
    }
}

/// Mean over all captured cross maps and over `tokens` of the token columns.
pub fn aggregate_cross(bundle: &AttentionBundle, tokens: &[usize]) -> Result<AggregatedMap> {
    if bundle.cross.is_empty() {
        return Err(Error::Invalid("attention bundle has no cross maps".into()));
    }
    if tokens.is_empty() {
        return Err(Error::Invalid("empty token set".into()));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= bundle.n_tokens) {
        return Err(Error::Invalid(format!(
            "token index {t} out of range for {} tokens",
            bundle.n_tokens
        )));
    }
    let hw = bundle.hw();
    let n = bundle.n_tokens;
    let mut values = vec![0.0; hw];
    for m in &bundle.cross {
        for &t in tokens {
            for (cell, v) in values.iter_mut().enumerate() {
                *v += m[cell * n + t];
            }
        }
    }
    let scale = 1.0 / (bundle.cross.len() * tokens.len()) as f64;
    values.iter_mut().for_each(|v| *v *= scale);
    Ok(AggregatedMap {
        h: bundle.h,
        w: bundle.w,
        values,
    })
}

/// Adjoint of [`aggregate_cross`]: accumulates `upstream` (an `hw` gradient)
/// into the token columns of every cross map.
pub fn aggregate_cross_adjoint(tokens: &[usize], upstream: &[f64], grad: &mut BundleGrad, n_tokens: usize) {
    let scale = 1.0 / (grad.cross.len() * tokens.len()) as f64;
    for m in grad.cross.iter_mut() {
        for &t in tokens {
            for (cell, &g) in upstream.iter().enumerate() {
                m[cell * n_tokens + t] += g * scale;
            }
        }
    }
}

/// Mean over captured self maps, then over the rows (query cells) inside
/// `box_mask`: the attention mass each cell receives from the subject region.
pub fn aggregate_self(bundle: &AttentionBundle, box_mask: &BinaryMask) -> Result<AggregatedMap> {
    if bundle.self_attn.is_empty() {
        return Err(Error::Invalid("attention bundle has no self maps".into()));
    }
    if (box_mask.h, box_mask.w) != (bundle.h, bundle.w) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs attention {}x{}",
            box_mask.h, box_mask.w, bundle.h, bundle.w
        )));
    }
    let rows = box_mask.indices();
    if rows.is_empty() {
        return Err(Error::Invalid("empty box mask".into()));
    }
    let hw = bundle.hw();
    let mut values = vec![0.0; hw];
    for m in &bundle.self_attn {
        for &r in &rows {
            for (v, &x) in values.iter_mut().zip(&m[r * hw..(r + 1) * hw]) {
                *v += x;
            }
        }
    }
    let scale = 1.0 / (bundle.self_attn.len() * rows.len()) as f64;
    values.iter_mut().for_each(|v| *v *= scale);
    Ok(AggregatedMap {
        h: bundle.h,
        w: bundle.w,
        values,
    })
}

/// Adjoint of [`aggregate_self`].
pub fn aggregate_self_adjoint(box_mask: &BinaryMask, upstream: &[f64], grad: &mut BundleGrad) {
    let rows = box_mask.indices();
    let hw = upstream.len();
    let scale = 1.0 / (grad.self_attn.len() * rows.len()) as f64;
    for m in grad.self_attn.iter_mut() {
        for &r in &rows {
            for (x, &g) in m[r * hw..(r + 1) * hw].iter_mut().zip(upstream) {
                *x += g * scale;
            }
        }
    }
}

/// Restricts `map` to the cells of `bbox` and renormalizes to a distribution.
pub fn extract_patch(map: &AggregatedMap, bbox: &BBox) -> PatchDistribution {
    let mask = rasterize_mask(bbox, map.h, map.w);
    extract_patch_masked(map, &mask)
}

pub fn extract_patch_masked(map: &AggregatedMap, mask: &BinaryMask) -> PatchDistribution {
    let cells = mask.indices();
    let raw: Vec<f64> = cells.iter().map(|&c| map.values[c]).collect();
    let mass: f64 = raw.iter().sum();
    if mass < EPS_NORM {
        let u = 1.0 / cells.len() as f64;
        return PatchDistribution {
            values: vec![u; cells.len()],
            cells,
            mass,
            fallback: true,
        };
    }
    PatchDistribution {
        values: raw.iter().map(|&x| x / mass).collect(),
        cells,
        mass,
        fallback: false,
    }
}

/// Pulls a gradient on a patch's normalized values back onto the full map
/// (accumulating into `map_grad`). The uniform fallback is constant, so it
/// contributes nothing.
pub fn extract_patch_adjoint(patch: &PatchDistribution, upstream: &[f64], map_grad: &mut [f64]) {
    if patch.fallback {
        return;
    }
    let dot: f64 = upstream.iter().zip(&patch.values).map(|(g, p)| g * p).sum();
    for ((&cell, &g), _) in patch.cells.iter().zip(upstream).zip(&patch.values) {
        map_grad[cell] += (g - dot) / patch.mass;
    }
}

#[derive(Serialize)]
struct DumpEntry<'a> {
    label: &'a str,
    file: String,
    max: f64,
    sum: f64,
}

/// Writes each map as an upscaled grayscale PNG (normalized by its max) plus
/// a `maps.json` manifest, for attention visualization.
pub fn dump_maps(dir: &Path, prefix: &str, maps: &[(String, AggregatedMap)], upscale: u32) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (label, map) in maps {
        let max = map.values.iter().copied().fold(0.0, f64::max);
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        let file = format!("{prefix}_{label}.png");
        let img = image::GrayImage::from_fn(map.w as u32 * upscale, map.h as u32 * upscale, |x, y| {
            let v = map.values[(y / upscale) as usize * map.w + (x / upscale) as usize];
            image::Luma([(v * scale).round().clamp(0.0, 255.0) as u8])
        });
        img.save(dir.join(&file))
            .map_err(|e| Error::Image(e.to_string()))?;
        entries.push(DumpEntry {
            label,
            file,
            max,
            sum: map.values.iter().sum(),
        });
    }
    let manifest = dir.join(format!("{prefix}_maps.json"));
    std::fs::write(manifest, serde_json::to_string_pretty(&entries)?)?;
    Ok(())
}
