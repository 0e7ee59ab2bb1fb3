//! Matching detections to layout bindings and scoring a single run.

use serde::{Deserialize, Serialize};

use crate::image_io::IMAGE_SIZE;
use crate::layout::{BBox, LayoutSpec};
use crate::toymodel::vocab::{Color, Shape, Texture};

use super::detect::Detection;

/// What a binding asks for, read from its subject and attribute words.
#[derive(Debug, Clone, PartialEq)]
pub struct BindingTarget {
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub texture: Option<Texture>,
    pub bbox: BBox,
}

pub fn binding_targets(layout: &LayoutSpec) -> Vec<BindingTarget> {
    let word = |i: usize| layout.prompt.get(i).map(String::as_str).unwrap_or("");
    layout
        .bindings
        .iter()
        .map(|b| {
            let shape = b
                .subject_tokens
                .iter()
                .find_map(|&i| Shape::ALL.into_iter().find(|s| s.name() == word(i)));
            let color = b
                .attribute_tokens
                .iter()
                .find_map(|&i| Color::ALL.into_iter().find(|c| c.name() == word(i)));
            let texture = b
                .attribute_tokens
                .iter()
                .find_map(|&i| Texture::ALL.into_iter().find(|t| t.name() == word(i)));
            BindingTarget {
                shape,
                color,
                texture,
                bbox: b.bbox,
            }
        })
        .collect()
}

/// Scores of one generated image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub spatial: f64,
    pub attribute: f64,
    pub leakage: f64,
    pub detections: usize,
    pub matched: usize,
    pub correct_class: usize,
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Greedy one-to-one assignment: pairs whose centroid lies inside the box
/// come first, then by centroid distance to the box center. Returns
/// `(detection, binding)` pairs.
pub fn match_detections(dets: &[Detection], targets: &[BindingTarget]) -> Vec<(usize, usize)> {
    let s = IMAGE_SIZE as f64;
    let mut cands = Vec::with_capacity(dets.len() * targets.len());
    for (di, d) in dets.iter().enumerate() {
        let (cx, cy) = (d.centroid.0 / s, d.centroid.1 / s);
        for (bi, t) in targets.iter().enumerate() {
            let outside = !t.bbox.contains_point(cx, cy);
            let (bx, by) = t.bbox.center();
            let dist = ((cx - bx).powi(2) + (cy - by).powi(2)).sqrt();
            cands.push((outside, dist, di, bi));
        }
    }
    // Ties are broken by detection content rather than position in the list,
    // so the result does not depend on detection order.
    cands.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then_with(|| detection_key(&dets[a.2]).cmp(&detection_key(&dets[b.2])))
            .then(a.3.cmp(&b.3))
    });
    let mut used_d = vec![false; dets.len()];
    let mut used_b = vec![false; targets.len()];
    let mut pairs = Vec::new();
    for (_, _, di, bi) in cands {
        if !used_d[di] && !used_b[bi] {
            used_d[di] = true;
            used_b[bi] = true;
            pairs.push((di, bi));
        }
    }
    pairs.sort_by_key(|p| p.1);
    pairs
}

fn detection_key(d: &Detection) -> (u64, u64, usize, usize, usize, usize, usize, Shape, Color, Texture) {
    (
        d.centroid.0.to_bits(),
        d.centroid.1.to_bits(),
        d.bbox.x0,
        d.bbox.y0,
        d.bbox.x1,
        d.bbox.y1,
        d.area,
        d.shape,
        d.color,
        d.texture,
    )
}

pub fn score_run(dets: &[Detection], layout: &LayoutSpec) -> RunMetrics {
    let targets = binding_targets(layout);
    let pairs = match_detections(dets, &targets);
    let s = IMAGE_SIZE as f64;
    let inside = |d: &Detection, b: &BBox| b.contains_point(d.centroid.0 / s, d.centroid.1 / s);

    let mut correct_class = 0;
    let mut in_box = 0;
    let mut attr_ok = 0;
    let mut matched_d = vec![false; dets.len()];
    for &(di, bi) in &pairs {
        matched_d[di] = true;
        let (d, t) = (&dets[di], &targets[bi]);
        if t.shape.is_none_or(|s| s == d.shape) {
            correct_class += 1;
        }
        if inside(d, &t.bbox) {
            in_box += 1;
        }
        if t.color.is_none_or(|c| c == d.color) && t.texture.is_none_or(|x| x == d.texture) {
            attr_ok += 1;
        }
    }
    let leaked = dets
        .iter()
        .zip(&matched_d)
        .any(|(d, &m)| !m && !targets.iter().any(|t| inside(d, &t.bbox)));

    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(correct_class, dets.len());
    let recall = ratio(correct_class, targets.len());
    RunMetrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        spatial: ratio(in_box, pairs.len()),
        attribute: ratio(attr_ok, pairs.len()),
        leakage: if leaked { 1.0 } else { 0.0 },
        detections: dets.len(),
        matched: pairs.len(),
        correct_class,
    }
}

/// Per-metric means over runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub runs: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub spatial: f64,
    pub attribute: f64,
    pub leakage: f64,
}

pub fn aggregate<'a>(runs: impl IntoIterator<Item = &'a RunMetrics>) -> AggregateMetrics {
    let mut a = AggregateMetrics::default();
    for r in runs {
        a.runs += 1;
        a.precision += r.precision;
        a.recall += r.recall;
        a.f1 += r.f1;
        a.spatial += r.spatial;
        a.attribute += r.attribute;
        a.leakage += r.leakage;
    }
    if a.runs > 0 {
        let n = a.runs as f64;
        for v in [&mut a.precision, &mut a.recall, &mut a.f1, &mut a.spatial, &mut a.attribute, &mut a.leakage] {
            *v /= n;
        }
    }
    a
}
