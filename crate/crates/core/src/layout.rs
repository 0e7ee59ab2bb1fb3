//! Layout specifications: which prompt tokens name each subject, where the
//! subject's box is, and which tokens are its attributes. Boxes rasterize to
//! binary masks at any grid resolution.
//!
//! A grid cell belongs to a box when the cell center lies in the half-open
//! box `[x0, x1) × [y0, y1)`. A box too small to contain any cell center
//! still claims the one cell holding its own center, so masks of valid boxes
//! are never empty.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LAYOUT_SCHEMA: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("malformed layout document: {0}")]
    Malformed(String),
    #[error("unsupported layout schema {0} (expected {LAYOUT_SCHEMA})")]
    UnsupportedSchema(u32),
    #[error("layout has no subjects")]
    NoSubjects,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("subject {0} has no subject tokens")]
    EmptySubjectTokens(usize),
    #[error("subject {0}: box coordinates must be finite and within [0, 1]")]
    BoxOutOfRange(usize),
    #[error("subject {0}: box has zero or negative area")]
    ZeroAreaBox(usize),
    #[error("subject {binding}: token index {index} out of range for a prompt of {len} tokens")]
    TokenOutOfRange {
        binding: usize,
        index: usize,
        len: usize,
    },
    #[error("token index {0} is used as a subject token more than once")]
    DuplicateSubjectToken(usize),
    #[error("subject {0}: token used both as subject and attribute")]
    SubjectAttributeOverlap(usize),
}

/// Axis-aligned box in normalized image coordinates (`x` right, `y` down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    /// Validated constructor. `binding` is only used to label errors.
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, LayoutError> {
        Self::checked(x0, y0, x1, y1, 0)
    }

    fn checked(x0: f64, y0: f64, x1: f64, y1: f64, binding: usize) -> Result<Self, LayoutError> {
        let coords = [x0, y0, x1, y1];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0) {
            return Err(LayoutError::BoxOutOfRange(binding));
        }
        if x1 <= x0 || y1 <= y0 {
            return Err(LayoutError::ZeroAreaBox(binding));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        inter / (self.area() + other.area() - inter)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// One subject of the prompt with its box and attribute tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBinding {
    pub subject_tokens: Vec<usize>,
    pub bbox: BBox,
    pub attribute_tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutSpec {
    pub prompt: Vec<String>,
    pub bindings: Vec<SubjectBinding>,
}

impl LayoutSpec {
    /// Validates and builds a layout.
    pub fn new(prompt: Vec<String>, bindings: Vec<SubjectBinding>) -> Result<Self, LayoutError> {
        if prompt.is_empty() {
            return Err(LayoutError::EmptyPrompt);
        }
        if bindings.is_empty() {
            return Err(LayoutError::NoSubjects);
        }
        let len = prompt.len();
        let mut seen_subjects = Vec::new();
        for (i, b) in bindings.iter().enumerate() {
            if b.subject_tokens.is_empty() {
                return Err(LayoutError::EmptySubjectTokens(i));
            }
            BBox::checked(b.bbox.x0, b.bbox.y0, b.bbox.x1, b.bbox.y1, i)?;
            for &index in b.subject_tokens.iter().chain(&b.attribute_tokens) {
                if index >= len {
                    return Err(LayoutError::TokenOutOfRange { binding: i, index, len });
                }
            }
            for &s in &b.subject_tokens {
                if seen_subjects.contains(&s) {
                    return Err(LayoutError::DuplicateSubjectToken(s));
                }
                seen_subjects.push(s);
                if b.attribute_tokens.contains(&s) {
                    return Err(LayoutError::SubjectAttributeOverlap(i));
                }
            }
        }
        Ok(Self { prompt, bindings })
    }

    /// Subject count, the γ of the IoU loss.
    pub fn gamma(&self) -> usize {
        self.bindings.len()
    }
}

/// Grid of {0,1} cells, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    cells: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            cells: vec![false; h * w],
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            cells: vec![true; h * w],
        }
    }

    pub fn from_cells(h: usize, w: usize, cells: Vec<bool>) -> Self {
        assert_eq!(cells.len(), h * w, "mask size");
        Self { h, w, cells }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.cells[r * self.w + c] = v;
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Flat indices of set cells, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| c.then_some(i))
            .collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            h: self.h,
            w: self.w,
            cells: self.cells.iter().map(|&c| !c).collect(),
        }
    }

    pub fn or(&self, other: &Self) -> Self {
        assert_eq!((self.h, self.w), (other.h, other.w), "mask resolution");
        Self {
            h: self.h,
            w: self.w,
            cells: self.cells.iter().zip(&other.cells).map(|(&a, &b)| a || b).collect(),
        }
    }

    pub fn and(&self, other: &Self) -> Self {
        assert_eq!((self.h, self.w), (other.h, other.w), "mask resolution");
        Self {
            h: self.h,
            w: self.w,
            cells: self.cells.iter().zip(&other.cells).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn is_superset_of(&self, other: &Self) -> bool {
        self.cells.iter().zip(&other.cells).all(|(&a, &b)| a || !b)
    }
}

/// Rasterizes `bbox` onto an `h×w` grid by cell-center containment, with the
/// center-cell fallback for boxes that cover no cell center.
pub fn rasterize_mask(bbox: &BBox, h: usize, w: usize) -> BinaryMask {
    assert!(h >= 1 && w >= 1, "rasterize_mask on empty grid");
    let mut mask = BinaryMask::empty(h, w);
    for r in 0..h {
        let cy = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let cx = (c as f64 + 0.5) / w as f64;
            if bbox.contains_point(cx, cy) {
                mask.set(r, c, true);
            }
        }
    }
    if mask.count() == 0 {
        let (cx, cy) = bbox.center();
        let c = ((cx * w as f64).floor() as usize).min(w - 1);
        let r = ((cy * h as f64).floor() as usize).min(h - 1);
        mask.set(r, c, true);
    }
    mask
}

/// Foreground mask `M` (union of all boxes) and its complement `M̄`.
pub fn union_foreground(layout: &LayoutSpec, h: usize, w: usize) -> (BinaryMask, BinaryMask) {
    let fg = layout
        .bindings
        .iter()
        .map(|b| rasterize_mask(&b.bbox, h, w))
        .fold(BinaryMask::empty(h, w), |acc, m| acc.or(&m));
    let bg = fg.complement();
    (fg, bg)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectDoc {
    tokens: Vec<usize>,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default)]
    attributes: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct LayoutDoc {
    schema: u32,
    prompt: Vec<String>,
    subjects: Vec<SubjectDoc>,
}

impl LayoutDoc {
    pub(crate) fn into_spec(self) -> Result<LayoutSpec, LayoutError> {
        if self.schema != LAYOUT_SCHEMA {
            return Err(LayoutError::UnsupportedSchema(self.schema));
        }
        let mut bindings = Vec::with_capacity(self.subjects.len());
        for (i, s) in self.subjects.into_iter().enumerate() {
            let [x0, y0, x1, y1] = s.bbox;
            bindings.push(SubjectBinding {
                subject_tokens: s.tokens,
                bbox: BBox::checked(x0, y0, x1, y1, i)?,
                attribute_tokens: s.attributes,
            });
        }
        LayoutSpec::new(self.prompt, bindings)
    }

    pub(crate) fn from_spec(spec: &LayoutSpec) -> Self {
        Self {
            schema: LAYOUT_SCHEMA,
            prompt: spec.prompt.clone(),
            subjects: spec
                .bindings
                .iter()
                .map(|b| SubjectDoc {
                    tokens: b.subject_tokens.clone(),
                    bbox: b.bbox.as_array(),
                    attributes: b.attribute_tokens.clone(),
                })
                .collect(),
        }
    }
}

impl Serialize for LayoutSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        LayoutDoc::from_spec(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for LayoutSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        LayoutDoc::deserialize(d)?
            .into_spec()
            .map_err(serde::de::Error::custom)
    }
}

/// Parses a JSON layout document:
///
/// ```json
/// { "schema": 1,
///   "prompt": ["<bos>", "red", "solid", "circle", "<sep>"],
///   "subjects": [ { "tokens": [3], "box": [0.1, 0.1, 0.5, 0.5], "attributes": [1, 2] } ] }
/// ```
pub fn parse_layout(text: &str) -> Result<LayoutSpec, LayoutError> {
    let doc: LayoutDoc =
        serde_json::from_str(text).map_err(|e| LayoutError::Malformed(e.to_string()))?;
    doc.into_spec()
}

pub fn serialize_layout(spec: &LayoutSpec) -> String {
    serde_json::to_string_pretty(&LayoutDoc::from_spec(spec)).expect("layout serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn prompt(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    fn binding(s: usize, b: [f64; 4], a: &[usize]) -> SubjectBinding {
        SubjectBinding {
            subject_tokens: vec![s],
            bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            attribute_tokens: a.to_vec(),
        }
    }

    /// Independent cell-center oracle: counts cells whose centers fall in the box.
    fn center_count(b: &BBox, h: usize, w: usize) -> usize {
        let mut n = 0;
        for r in 0..h {
            for c in 0..w {
                let x = (2 * c + 1) as f64 / (2 * w) as f64;
                let y = (2 * r + 1) as f64 / (2 * h) as f64;
                if b.x0 <= x && x < b.x1 && b.y0 <= y && y < b.y1 {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn parses_minimal_layout() {
        let text = r#"{"schema":1,"prompt":["<bos>","red","circle","<sep>"],
            "subjects":[{"tokens":[2],"box":[0.1,0.1,0.5,0.5],"attributes":[1]}]}"#;
        let spec = parse_layout(text).unwrap();
        assert_eq!(spec.gamma(), 1);
        assert_eq!(spec.bindings[0].attribute_tokens, vec![1]);
    }

    #[test]
    fn rejects_zero_area_box() {
        let text = r#"{"schema":1,"prompt":["a","b","c"],
            "subjects":[{"tokens":[2],"box":[0.5,0.5,0.5,0.9],"attributes":[]}]}"#;
        assert_eq!(parse_layout(text), Err(LayoutError::ZeroAreaBox(0)));
    }

    #[test]
    fn rejects_bad_inputs() {
        let base = |subjects: &str| {
            format!(r#"{{"schema":1,"prompt":["a","b","c","d"],"subjects":[{subjects}]}}"#)
        };
        assert_eq!(
            parse_layout(&base(r#"{"tokens":[1],"box":[-0.1,0,0.5,0.5]}"#)),
            Err(LayoutError::BoxOutOfRange(0))
        );
        assert_eq!(
            parse_layout(&base(r#"{"tokens":[9],"box":[0,0,0.5,0.5]}"#)),
            Err(LayoutError::TokenOutOfRange { binding: 0, index: 9, len: 4 })
        );
        assert_eq!(
            parse_layout(&base(
                r#"{"tokens":[1],"box":[0,0,0.5,0.5]},{"tokens":[1],"box":[0.5,0.5,1,1]}"#
            )),
            Err(LayoutError::DuplicateSubjectToken(1))
        );
        assert_eq!(
            parse_layout(&base(r#"{"tokens":[1],"box":[0,0,0.5,0.5],"attributes":[1]}"#)),
            Err(LayoutError::SubjectAttributeOverlap(0))
        );
        assert_eq!(
            parse_layout(&base(r#"{"tokens":[],"box":[0,0,0.5,0.5]}"#)),
            Err(LayoutError::EmptySubjectTokens(0))
        );
        assert_eq!(parse_layout(&base("")), Err(LayoutError::NoSubjects));
        assert!(matches!(parse_layout("{not json"), Err(LayoutError::Malformed(_))));
        let v2 = r#"{"schema":2,"prompt":["a"],"subjects":[{"tokens":[0],"box":[0,0,1,1]}]}"#;
        assert_eq!(parse_layout(v2), Err(LayoutError::UnsupportedSchema(2)));
    }

    #[test]
    fn three_bindings_round_trip_in_order() {
        let spec = LayoutSpec::new(
            prompt(10),
            vec![
                binding(3, [0.0, 0.0, 0.3, 0.3], &[1, 2]),
                binding(6, [0.4, 0.4, 0.7, 0.7], &[4, 5]),
                binding(9, [0.7, 0.0, 1.0, 0.3], &[]),
            ],
        )
        .unwrap();
        assert_eq!(spec.gamma(), 3);
        let back = parse_layout(&serialize_layout(&spec)).unwrap();
        assert_eq!(back, spec);
        let order: Vec<usize> = back.bindings.iter().map(|b| b.subject_tokens[0]).collect();
        assert_eq!(order, vec![3, 6, 9]);
    }

    #[test]
    fn full_box_covers_grid() {
        assert_eq!(rasterize_mask(&BBox::full(), 8, 8).count(), 64);
    }

    #[test]
    fn quadrant_box_has_sixteen_cells() {
        let b = BBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        assert_eq!(center_count(&b, 8, 8), 16);
        let m = rasterize_mask(&b, 8, 8);
        assert_eq!(m.count(), 16);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(m.get(r, c), r < 4 && c < 4);
            }
        }
    }

    #[test]
    fn tiny_box_falls_back_to_center_cell() {
        let b = BBox::new(0.49, 0.49, 0.51, 0.51).unwrap();
        assert_eq!(center_count(&b, 4, 4), 0);
        let m = rasterize_mask(&b, 4, 4);
        assert_eq!(m.count(), 1);
        assert!(m.get(2, 2));
    }

    #[test]
    fn union_of_disjoint_quadrants() {
        let spec = LayoutSpec::new(
            prompt(3),
            vec![
                binding(0, [0.0, 0.0, 0.5, 0.5], &[]),
                binding(1, [0.5, 0.5, 1.0, 1.0], &[]),
            ],
        )
        .unwrap();
        let (fg, bg) = union_foreground(&spec, 8, 8);
        assert_eq!(fg.count(), 32);
        assert_eq!(bg.count(), 32);
    }

    #[test]
    fn full_box_leaves_no_background() {
        let spec = LayoutSpec::new(prompt(1), vec![binding(0, [0.0, 0.0, 1.0, 1.0], &[])]).unwrap();
        let (_, bg) = union_foreground(&spec, 8, 8);
        assert_eq!(bg.count(), 0);
    }

    #[test]
    fn overlapping_boxes_count_cells_once() {
        let spec = LayoutSpec::new(
            prompt(2),
            vec![
                binding(0, [0.0, 0.0, 0.5, 0.5], &[]),
                binding(1, [0.25, 0.25, 0.75, 0.75], &[]),
            ],
        )
        .unwrap();
        let (fg, _) = union_foreground(&spec, 8, 8);
        assert_eq!(fg.count(), 16 + 16 - 4);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..0.95f64, 0.0..0.95f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x0, y0, fw, fh)| {
            let x1 = (x0 + fw * (1.0 - x0)).min(1.0).max(x0 + 1e-3);
            let y1 = (y0 + fh * (1.0 - y0)).min(1.0).max(y0 + 1e-3);
            BBox::new(x0, y0, x1, y1).unwrap()
        })
    }

    proptest! {
        #[test]
        fn rasterization_matches_center_oracle(b in arb_box(), h in 1usize..20, w in 1usize..20) {
            let m = rasterize_mask(&b, h, w);
            let expected = center_count(&b, h, w);
            prop_assert_eq!(m.count(), expected.max(1));
        }

        #[test]
        fn rasterization_is_monotone(outer in arb_box(), t in (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), res in 1usize..24) {
            // Inner box carved out of the outer one.
            let w = outer.x1 - outer.x0;
            let h = outer.y1 - outer.y0;
            let (a, b) = (t.0.min(t.1), t.0.max(t.1));
            let (c, d) = (t.2.min(t.3), t.2.max(t.3));
            prop_assume!(b - a > 1e-3 && d - c > 1e-3);
            let inner = BBox::new(outer.x0 + a * w, outer.y0 + c * h, outer.x0 + b * w, outer.y0 + d * h).unwrap();
            prop_assume!(outer.contains_box(&inner));
            let mi = rasterize_mask(&inner, res, res);
            let mo = rasterize_mask(&outer, res, res);
            // The center-cell fallback can place a lone cell for an inner box
            // that covers no centers; that cell still lies inside the outer box
            // whenever the outer box covers any centers around it.
            if center_count(&inner, res, res) > 0 {
                prop_assert!(mo.is_superset_of(&mi));
            }
        }

        #[test]
        fn foreground_and_background_partition(boxes in proptest::collection::vec(arb_box(), 1..4), res in 1usize..33) {
            let bindings = boxes.iter().enumerate().map(|(i, b)| SubjectBinding {
                subject_tokens: vec![i], bbox: *b, attribute_tokens: vec![] }).collect();
            let spec = LayoutSpec::new(prompt(4), bindings).unwrap();
            let (fg, bg) = union_foreground(&spec, res, res);
            prop_assert_eq!(fg.or(&bg).count(), res * res);
            prop_assert_eq!(fg.and(&bg).count(), 0);
        }

        #[test]
        fn parse_serialize_identity(boxes in proptest::collection::vec(arb_box(), 1..5), attrs in proptest::collection::vec(proptest::option::of(10usize..16), 1..5)) {
            let bindings: Vec<_> = boxes.iter().enumerate().map(|(i, b)| SubjectBinding {
                subject_tokens: vec![i],
                bbox: *b,
                attribute_tokens: attrs.get(i).copied().flatten().into_iter().collect(),
            }).collect();
            let spec = LayoutSpec::new(prompt(16), bindings).unwrap();
            let back = parse_layout(&serialize_layout(&spec)).unwrap();
            prop_assert_eq!(back, spec);
        }
    }
}
