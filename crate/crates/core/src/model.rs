//! Geometry and annotation value types shared by every stage of the pipeline.
//!
//! Coordinates are continuous pixels with the origin at the top-left corner,
//! x growing rightward and y downward. Boxes are stored in center form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    DegenerateImage { width: u32, height: u32 },
    #[error("box size must be positive and finite, got w={w} h={h}")]
    DegenerateBox { w: f64, h: f64 },
    #[error("box center must be finite")]
    NonFiniteCenter,
    #[error("probability {value} outside {range}")]
    Probability { value: f64, range: &'static str },
    #[error("anchor {index} has fractions ({w}, {h}) outside (0, 1]")]
    Anchor { index: usize, w: f64, h: f64 },
    #[error("anchor list is empty")]
    NoAnchors,
    #[error("invalid engine parameter `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
}

/// The image an annotator is looking at.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawImageRef")]
pub struct ImageRef {
    id: String,
    width: u32,
    height: u32,
    uri: String,
}

#[derive(Deserialize)]
struct RawImageRef {
    id: String,
    width: u32,
    height: u32,
    #[serde(default)]
    uri: String,
}

impl TryFrom<RawImageRef> for ImageRef {
    type Error = ModelError;

    fn try_from(raw: RawImageRef) -> Result<Self, Self::Error> {
        ImageRef::new(raw.id, raw.width, raw.height, raw.uri)
    }
}

impl ImageRef {
    pub fn new(
        id: impl Into<String>,
        width: u32,
        height: u32,
        uri: impl Into<String>,
    ) -> Result<Self, ModelError> {
        if width == 0 || height == 0 {
            return Err(ModelError::DegenerateImage { width, height });
        }
        Ok(Self {
            id: id.into(),
            width,
            height,
            uri: uri.into(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn uri(&self) -> &str {
        &self.uri
    }

    pub fn viewport(&self) -> Viewport {
        Viewport {
            x0: 0.0,
            y0: 0.0,
            x1: f64::from(self.width),
            y1: f64::from(self.height),
        }
    }

    /// The whole image as a box.
    pub fn full_box(&self) -> BBox {
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        BBox {
            cx: w / 2.0,
            cy: h / 2.0,
            w,
            h,
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.viewport().contains_point(x, y)
    }
}

/// An axis-aligned rectangle in corner form that boxes get clamped into.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewport {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Viewport {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Viewport {
        Viewport {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }
}

/// Axis-aligned box in center form. Width and height are always positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Deserialize)]
struct RawBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = ModelError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        BBox::new(raw.cx, raw.cy, raw.w, raw.h)
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, ModelError> {
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(ModelError::DegenerateBox { w, h });
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(ModelError::NonFiniteCenter);
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, ModelError> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn recentered(&self, cx: f64, cy: f64) -> BBox {
        BBox { cx, cy, ..*self }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        self.recentered(self.cx + dx, self.cy + dy)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        x >= x1 && x <= x2 && y >= y1 && y <= y2
    }

    /// Strict interior test; points on the border are outside.
    pub fn strictly_contains_point(&self, x: f64, y: f64) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        x > x1 && x < x2 && y > y1 && y < y2
    }

    /// True when `inner` lies within `self`, allowing `tol` pixels of slack.
    pub fn contains_box(&self, inner: &BBox, tol: f64) -> bool {
        let (ox1, oy1, ox2, oy2) = self.corners();
        let (ix1, iy1, ix2, iy2) = inner.corners();
        ix1 >= ox1 - tol && iy1 >= oy1 - tol && ix2 <= ox2 + tol && iy2 <= oy2 + tol
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        iw * ih
    }

    /// Intersection of two boxes, `None` when they do not overlap.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        BBox::from_corners(ax1.max(bx1), ay1.max(by1), ax2.min(bx2), ay2.min(by2)).ok()
    }

    pub fn approx_eq(&self, other: &BBox, tol: f64) -> bool {
        (self.cx - other.cx).abs() <= tol
            && (self.cy - other.cy).abs() <= tol
            && (self.w - other.w).abs() <= tol
            && (self.h - other.h).abs() <= tol
    }
}

/// Intersection over union of two boxes.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Moves `b` inside the image, shrinking a dimension only when it is larger
/// than the image itself.
pub fn clamp_box_to_image(b: &BBox, img: &ImageRef) -> BBox {
    clamp_box_to_viewport(b, &img.viewport())
}

pub fn clamp_box_to_viewport(b: &BBox, vp: &Viewport) -> BBox {
    let w = b.w.min(vp.width());
    let h = b.h.min(vp.height());
    let cx = clamp_center(b.cx, w, vp.x0, vp.x1);
    let cy = clamp_center(b.cy, h, vp.y0, vp.y1);
    BBox { cx, cy, w, h }
}

fn clamp_center(c: f64, size: f64, lo: f64, hi: f64) -> f64 {
    let (min_c, max_c) = (lo + size / 2.0, hi - size / 2.0);
    if min_c >= max_c {
        (lo + hi) / 2.0
    } else {
        c.clamp(min_c, max_c)
    }
}

/// A human click on an object center, tagged with the class that was
/// active in the palette.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickAnnotation {
    pub x: f64,
    pub y: f64,
    pub class_id: u32,
    pub sequence: u64,
}

impl ClickAnnotation {
    pub fn new(x: f64, y: f64, class_id: u32, sequence: u64) -> Self {
        Self {
            x,
            y,
            class_id,
            sequence,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        (self.x - x).hypot(self.y - y)
    }
}

/// One detector output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection")]
pub struct Detection {
    #[serde(rename = "box")]
    bbox: BBox,
    class_id: u32,
    prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sub_threshold_score: Option<f64>,
}

#[derive(Deserialize)]
struct RawDetection {
    #[serde(rename = "box")]
    bbox: BBox,
    class_id: u32,
    prob: f64,
    #[serde(default)]
    sub_threshold_score: Option<f64>,
}

impl TryFrom<RawDetection> for Detection {
    type Error = ModelError;

    fn try_from(raw: RawDetection) -> Result<Self, Self::Error> {
        Detection::new(raw.bbox, raw.class_id, raw.prob)?.with_sub_threshold_score(raw.sub_threshold_score)
    }
}

impl Detection {
    pub fn new(bbox: BBox, class_id: u32, prob: f64) -> Result<Self, ModelError> {
        if !(prob > 0.0 && prob <= 1.0) {
            return Err(ModelError::Probability {
                value: prob,
                range: "(0, 1]",
            });
        }
        Ok(Self {
            bbox,
            class_id,
            prob,
            sub_threshold_score: None,
        })
    }

    pub fn with_sub_threshold_score(mut self, score: Option<f64>) -> Result<Self, ModelError> {
        if let Some(s) = score {
            if !(0.0..=1.0).contains(&s) {
                return Err(ModelError::Probability {
                    value: s,
                    range: "[0, 1]",
                });
            }
        }
        self.sub_threshold_score = score;
        Ok(self)
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn prob(&self) -> f64 {
        self.prob
    }

    pub fn sub_threshold_score(&self) -> Option<f64> {
        self.sub_threshold_score
    }

    pub fn with_box(&self, bbox: BBox) -> Detection {
        Detection { bbox, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Detector and click agreed on the class.
    Confirmed,
    /// The click corrected the detector's class.
    Relabeled,
    /// Found by the hierarchical proposal search.
    Recovered,
    /// Nothing was found for this click.
    Unresolved,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Confirmed => "confirmed",
            Provenance::Relabeled => "relabeled",
            Provenance::Recovered => "recovered",
            Provenance::Unresolved => "unresolved",
        }
    }
}

/// A final per-click annotation. `bbox` is absent exactly when the
/// provenance is `Unresolved`, in which case `effective_prob` is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinedAnnotation {
    #[serde(rename = "box")]
    pub bbox: Option<BBox>,
    pub class_id: u32,
    pub effective_prob: f64,
    pub provenance: Provenance,
    pub source_click: u64,
    pub depth: u32,
}

impl RefinedAnnotation {
    pub fn corrected(bbox: BBox, class_id: u32, prob: f64, relabeled: bool, click: u64) -> Self {
        Self {
            bbox: Some(bbox),
            class_id,
            effective_prob: prob,
            provenance: if relabeled {
                Provenance::Relabeled
            } else {
                Provenance::Confirmed
            },
            source_click: click,
            depth: 0,
        }
    }

    pub fn recovered(bbox: BBox, class_id: u32, effective_prob: f64, depth: u32, click: u64) -> Self {
        debug_assert!(depth >= 1);
        Self {
            bbox: Some(bbox),
            class_id,
            effective_prob,
            provenance: Provenance::Recovered,
            source_click: click,
            depth,
        }
    }

    pub fn unresolved(click: &ClickAnnotation) -> Self {
        Self {
            bbox: None,
            class_id: click.class_id,
            effective_prob: 0.0,
            provenance: Provenance::Unresolved,
            source_click: click.sequence,
            depth: 0,
        }
    }

    pub fn is_resolved(&self) -> bool {
        self.bbox.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PruningMode {
    #[default]
    Exhaustive,
    BestFirst,
}

/// Anchor shape as fractions of the parent region's width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub w_frac: f64,
    pub h_frac: f64,
}

impl Anchor {
    pub const fn new(w_frac: f64, h_frac: f64) -> Self {
        Self { w_frac, h_frac }
    }
}

/// Nested default anchor list; the first K entries are used for K anchors.
pub const DEFAULT_ANCHORS: [Anchor; 7] = [
    Anchor::new(0.08, 0.12),
    Anchor::new(0.20, 0.30),
    Anchor::new(0.45, 0.55),
    Anchor::new(0.12, 0.30),
    Anchor::new(0.55, 0.30),
    Anchor::new(0.30, 0.12),
    Anchor::new(0.80, 0.80),
];

pub fn default_anchors(k: usize) -> Result<Vec<Anchor>, ModelError> {
    if k == 0 {
        return Err(ModelError::NoAnchors);
    }
    if k > DEFAULT_ANCHORS.len() {
        return Err(ModelError::Config {
            field: "anchors",
            reason: format!("at most {} default anchors exist, asked for {k}", DEFAULT_ANCHORS.len()),
        });
    }
    Ok(DEFAULT_ANCHORS[..k].to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub anchors: Vec<Anchor>,
    pub max_depth: u32,
    pub match_alpha: f64,
    pub context_factor: f64,
    pub depth_penalty: f64,
    pub pruning: PruningMode,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            anchors: DEFAULT_ANCHORS[..5].to_vec(),
            max_depth: 3,
            match_alpha: 0.5,
            context_factor: 1.5,
            depth_penalty: 0.9,
            pruning: PruningMode::Exhaustive,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.anchors.is_empty() {
            return Err(ModelError::NoAnchors);
        }
        for (index, a) in self.anchors.iter().enumerate() {
            if !(a.w_frac > 0.0 && a.w_frac <= 1.0 && a.h_frac > 0.0 && a.h_frac <= 1.0) {
                return Err(ModelError::Anchor {
                    index,
                    w: a.w_frac,
                    h: a.h_frac,
                });
            }
        }
        if self.max_depth < 1 {
            return Err(ModelError::Config {
                field: "max_depth",
                reason: "must be at least 1".into(),
            });
        }
        if !(self.match_alpha > 0.0 && self.match_alpha.is_finite()) {
            return Err(ModelError::Config {
                field: "match_alpha",
                reason: format!("must be positive, got {}", self.match_alpha),
            });
        }
        if !(self.context_factor >= 1.0 && self.context_factor.is_finite()) {
            return Err(ModelError::Config {
                field: "context_factor",
                reason: format!("must be >= 1, got {}", self.context_factor),
            });
        }
        if !(self.depth_penalty > 0.0 && self.depth_penalty <= 1.0) {
            return Err(ModelError::Config {
                field: "depth_penalty",
                reason: format!("must lie in (0, 1], got {}", self.depth_penalty),
            });
        }
        Ok(())
    }

    pub fn with_anchor_count(mut self, k: usize) -> Result<Self, ModelError> {
        self.anchors = default_anchors(k)?;
        Ok(self)
    }
}
