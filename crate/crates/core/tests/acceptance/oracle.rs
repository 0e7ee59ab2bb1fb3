//! Brute-force scalar reference implementations of the guidance losses.
//!
//! Written from the definitions with explicit loops over cells, tokens and
//! maps. Nothing here calls into the library's loss or attention code.

pub const EPS_NORM: f64 = 1e-8;
pub const EPS_KL: f64 = 1e-10;
pub const EPS_SIGMA: f64 = 1e-6;

/// A subject: its token ids, box `[x0, y0, x1, y1]` and attribute token ids.
#[derive(Debug, Clone)]
pub struct Subject {
    pub tokens: Vec<usize>,
    pub bbox: [f64; 4],
    pub attributes: Vec<usize>,
}

/// Cross maps are `[map][cell][token]`, self maps `[map][query][key]`.
#[derive(Debug, Clone)]
pub struct Maps {
    pub h: usize,
    pub w: usize,
    pub cross: Vec<Vec<Vec<f64>>>,
    pub self_attn: Vec<Vec<Vec<f64>>>,
}

pub fn mask(bbox: [f64; 4], h: usize, w: usize) -> Vec<bool> {
    let [x0, y0, x1, y1] = bbox;
    let mut m = vec![false; h * w];
    let mut any = false;
    for r in 0..h {
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            let y = (r as f64 + 0.5) / h as f64;
            if x >= x0 && x < x1 && y >= y0 && y < y1 {
                m[r * w + c] = true;
                any = true;
            }
        }
    }
    if !any {
        let cx = (x0 + x1) / 2.0;
        let cy = (y0 + y1) / 2.0;
        let c = ((cx * w as f64) as usize).min(w - 1);
        let r = ((cy * h as f64) as usize).min(h - 1);
        m[r * w + c] = true;
    }
    m
}

pub fn background(subjects: &[Subject], h: usize, w: usize) -> Vec<bool> {
    let mut bg = vec![true; h * w];
    for s in subjects {
        for (b, m) in bg.iter_mut().zip(mask(s.bbox, h, w)) {
            if m {
                *b = false;
            }
        }
    }
    bg
}

pub fn cross_map(maps: &Maps, tokens: &[usize]) -> Vec<f64> {
    let hw = maps.h * maps.w;
    let mut out = vec![0.0; hw];
    let mut count = 0.0;
    for m in &maps.cross {
        for &t in tokens {
            count += 1.0;
            for cell in 0..hw {
                out[cell] += m[cell][t];
            }
        }
    }
    out.iter().map(|v| v / count).collect()
}

pub fn self_map(maps: &Maps, region: &[bool]) -> Vec<f64> {
    let hw = maps.h * maps.w;
    let mut out = vec![0.0; hw];
    let mut count = 0.0;
    for m in &maps.self_attn {
        for q in 0..hw {
            if region[q] {
                count += 1.0;
                for k in 0..hw {
                    out[k] += m[q][k];
                }
            }
        }
    }
    out.iter().map(|v| v / count).collect()
}

fn iou_single(map: &[f64], region: &[bool], gamma: f64) -> f64 {
    let inside: f64 = map.iter().zip(region).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    let outside: f64 = map.iter().zip(region).filter(|(_, &m)| !m).map(|(v, _)| v).sum();
    if inside + gamma * outside < EPS_NORM {
        return 1.0;
    }
    1.0 - inside / (inside + gamma * outside)
}

/// `Σ Lᵢ²` over the given per-subject maps.
pub fn iou(per_subject: &[Vec<f64>], subjects: &[Subject], h: usize, w: usize) -> f64 {
    let gamma = subjects.len() as f64;
    per_subject
        .iter()
        .zip(subjects)
        .map(|(map, s)| iou_single(map, &mask(s.bbox, h, w), gamma).powi(2))
        .sum()
}

pub fn iou_cross(maps: &Maps, subjects: &[Subject]) -> f64 {
    let per: Vec<Vec<f64>> = subjects.iter().map(|s| cross_map(maps, &s.tokens)).collect();
    iou(&per, subjects, maps.h, maps.w)
}

pub fn iou_self(maps: &Maps, subjects: &[Subject]) -> f64 {
    let per: Vec<Vec<f64>> = subjects
        .iter()
        .map(|s| self_map(maps, &mask(s.bbox, maps.h, maps.w)))
        .collect();
    iou(&per, subjects, maps.h, maps.w)
}

/// Latent is `[channel][cell]` flattened channel-major.
pub fn mask_loss(z: &[f64], z_ref: &[f64], bg: &[bool], normalize: bool) -> f64 {
    let plane = bg.len();
    let channels = z.len() / plane;
    let mut total = 0.0;
    for ch in 0..channels {
        for cell in 0..plane {
            if bg[cell] {
                let i = ch * plane + cell;
                total += (z[i] - z_ref[i]).abs();
            }
        }
    }
    if normalize {
        total / z.len() as f64
    } else {
        total
    }
}

pub fn kl_prior(z: &[f64]) -> f64 {
    let n = z.len() as f64;
    let mut mean = 0.0;
    for x in z {
        mean += x;
    }
    mean /= n;
    let mut var = 0.0;
    for x in z {
        var += (x - mean) * (x - mean);
    }
    let sigma = (var / n).sqrt().max(EPS_SIGMA);
    (1.0 / sigma).ln() + (sigma * sigma + mean * mean - 1.0) / 2.0
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

pub fn sym_kl(p: &[f64], q: &[f64]) -> f64 {
    let smooth = |v: &[f64]| {
        let s: f64 = v.iter().map(|x| x + EPS_KL).sum();
        v.iter().map(|x| (x + EPS_KL) / s).collect::<Vec<f64>>()
    };
    let (p, q) = (smooth(p), smooth(q));
    0.5 * kl(&p, &q) + 0.5 * kl(&q, &p)
}

pub fn patch(map: &[f64], region: &[bool]) -> Vec<f64> {
    let vals: Vec<f64> = map.iter().zip(region).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
    let mass: f64 = vals.iter().sum();
    if mass < EPS_NORM {
        return vec![1.0 / vals.len() as f64; vals.len()];
    }
    vals.iter().map(|v| v / mass).collect()
}

pub fn sim(maps: &Maps, subjects: &[Subject]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for s in subjects.iter().filter(|s| !s.attributes.is_empty()) {
        let region = mask(s.bbox, maps.h, maps.w);
        total += sym_kl(&patch(&cross_map(maps, &s.tokens), &region), &patch(&cross_map(maps, &s.attributes), &region));
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn dis(maps: &Maps, subjects: &[Subject], tau: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (i, si) in subjects.iter().enumerate() {
        let region = mask(si.bbox, maps.h, maps.w);
        for (j, sj) in subjects.iter().enumerate() {
            if i == j || sj.attributes.is_empty() {
                continue;
            }
            let d = sym_kl(&patch(&cross_map(maps, &si.tokens), &region), &patch(&cross_map(maps, &sj.attributes), &region));
            total -= d.min(tau);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Raw components `[iou, mask, kl, sim, dis]`, weights
/// `[mask, kl, sim, dis, att]` and switches `[iou, mask, kl, att]`.
pub fn total(c: [f64; 5], w: [f64; 5], on: [bool; 4]) -> f64 {
    let pick = |b: bool, v: f64| if b { v } else { 0.0 };
    pick(on[0], c[0])
        + w[0] * pick(on[1], c[1])
        + w[1] * pick(on[2], c[2])
        + w[4] * (w[2] * pick(on[3], c[3]) + w[3] * pick(on[3], c[4]))
}
