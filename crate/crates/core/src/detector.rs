//! The detector abstraction and a seeded simulated detector.
//!
//! A [`Detector`] sees one crop at a time and answers in crop-local
//! coordinates (origin at the crop's top-left corner). [`detect_region`]
//! does the mapping back into image coordinates.
//!
//! [`SimulatedDetector`] derives detections from ground truth with
//! controllable misses, mislabels, false positives, and jitter. It exists to
//! exercise the pipeline without a neural network; a real model plugs in by
//! implementing [`Detector`].

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GroundTruthObject;
use crate::model::{BBox, Detection, ImageRef};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DetectorError {
    #[error("detector failed: {0}")]
    Failed(String),
}

/// A region submitted to the detector, in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    pub region: BBox,
    /// 0 for the full image, h for a depth-h proposal.
    pub depth: u32,
}

impl Crop {
    pub fn full(img: &ImageRef) -> Self {
        Self {
            region: img.full_box(),
            depth: 0,
        }
    }

    fn origin(&self) -> (f64, f64) {
        let (x1, y1, _, _) = self.region.corners();
        (x1, y1)
    }

    pub fn to_local(&self, b: &BBox) -> BBox {
        let (x0, y0) = self.origin();
        b.translated(-x0, -y0)
    }

    pub fn to_image(&self, b: &BBox) -> BBox {
        let (x0, y0) = self.origin();
        b.translated(x0, y0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutput {
    pub detections: Vec<Detection>,
    /// Best class-agnostic confidence among candidates that stayed below
    /// the reporting threshold in this region.
    pub sub_threshold_score: Option<f64>,
}

pub trait Detector: Send + Sync {
    /// Whether [`DetectorOutput::sub_threshold_score`] is ever populated.
    fn reports_sub_threshold(&self) -> bool {
        false
    }

    /// Detects objects inside `crop`. Returned boxes are crop-local.
    fn detect(&self, image: &ImageRef, crop: &Crop) -> Result<DetectorOutput, DetectorError>;
}

impl<D: Detector + ?Sized> Detector for &D {
    fn reports_sub_threshold(&self) -> bool {
        (**self).reports_sub_threshold()
    }

    fn detect(&self, image: &ImageRef, crop: &Crop) -> Result<DetectorOutput, DetectorError> {
        (**self).detect(image, crop)
    }
}

impl<D: Detector + ?Sized> Detector for std::sync::Arc<D> {
    fn reports_sub_threshold(&self) -> bool {
        (**self).reports_sub_threshold()
    }

    fn detect(&self, image: &ImageRef, crop: &Crop) -> Result<DetectorOutput, DetectorError> {
        (**self).detect(image, crop)
    }
}

const CONTAINMENT_TOL: f64 = 1e-6;

/// Runs `detector` on `crop` and returns detections in image coordinates.
/// Anything the detector reports outside the crop is discarded.
pub fn detect_region<D: Detector + ?Sized>(
    detector: &D,
    image: &ImageRef,
    crop: &Crop,
) -> Result<DetectorOutput, DetectorError> {
    let out = detector.detect(image, crop)?;
    let detections = out
        .detections
        .into_iter()
        .map(|d| d.with_box(crop.to_image(d.bbox())))
        .filter(|d| crop.region.contains_box(d.bbox(), CONTAINMENT_TOL))
        .collect();
    let sub_threshold_score = out.sub_threshold_score.filter(|s| (0.0..=1.0).contains(s));
    Ok(DetectorOutput {
        detections,
        sub_threshold_score,
    })
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid noise profile field `{field}`: {reason}")]
pub struct ProfileError {
    pub field: &'static str,
    pub reason: String,
}

/// Error model for the simulated detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseProfile {
    pub p_miss: f64,
    pub p_mislabel: f64,
    /// Expected false positives per full image (Poisson rate).
    pub p_false_positive: f64,
    /// Center jitter sigma as a fraction of the box side.
    pub center_jitter: f64,
    /// Size jitter sigma as a fraction of the box side.
    pub size_jitter: f64,
    /// Per-depth multiplier on the detection rate of objects inside crops.
    pub recover_gain: f64,
    pub seed: u64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self {
            p_miss: 0.0,
            p_mislabel: 0.0,
            p_false_positive: 0.0,
            center_jitter: 0.0,
            size_jitter: 0.0,
            recover_gain: 1.6,
            seed: 0,
        }
    }
}

impl NoiseProfile {
    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let prob = |field: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ProfileError {
                    field,
                    reason: format!("{v} is not a probability"),
                })
            }
        };
        let non_negative = |field: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ProfileError {
                    field,
                    reason: format!("{v} must be a finite value >= 0"),
                })
            }
        };
        prob("p_miss", self.p_miss)?;
        prob("p_mislabel", self.p_mislabel)?;
        non_negative("p_false_positive", self.p_false_positive)?;
        non_negative("center_jitter", self.center_jitter)?;
        non_negative("size_jitter", self.size_jitter)?;
        if !(self.recover_gain >= 1.0 && self.recover_gain.is_finite()) {
            return Err(ProfileError {
                field: "recover_gain",
                reason: format!("{} must be >= 1", self.recover_gain),
            });
        }
        Ok(())
    }

    /// Chance that a visible object is reported in a crop at `depth`.
    pub fn emission_probability(&self, depth: u32) -> f64 {
        ((1.0 - self.p_miss) * self.recover_gain.powi(depth as i32)).min(1.0)
    }
}

/// Fraction of an object's area that must fall inside a crop for the
/// simulated detector to be able to see it.
pub const MIN_VISIBLE_FRACTION: f64 = 0.8;

const TAG_OBJECT: u64 = 0x6f62_6a65_6374;
const TAG_FP_COUNT: u64 = 0x0066_7063_6e74;
const TAG_FP: u64 = 0x6670;

/// Side range of false positives, as a fraction of the queried region.
const FP_SIZE_FRAC: (f64, f64) = (0.05, 0.3);

/// Simulated detection over `region` (image coordinates in, image
/// coordinates out).
///
/// Each ground-truth object whose center lies in the region and which is
/// at least [`MIN_VISIBLE_FRACTION`] visible is reported with probability
/// [`NoiseProfile::emission_probability`]; otherwise it contributes a
/// sub-threshold score in [0.1, 0.45). Reported probabilities are drawn from
/// [0.5, 1.0), false positives from [0.5, 0.9).
pub fn sim_detect(
    image: &ImageRef,
    region: &BBox,
    depth: u32,
    truth: &[GroundTruthObject],
    classes: &[u32],
    profile: &NoiseProfile,
) -> DetectorOutput {
    let key = |index: u64, tag: u64| {
        [
            profile.seed,
            rng::hash_str(image.id()),
            rng::quantize(region.cx()),
            rng::quantize(region.cy()),
            rng::quantize(region.w()),
            rng::quantize(region.h()),
            index,
            tag,
        ]
    };
    let p_emit = profile.emission_probability(depth);
    let mut detections = Vec::new();
    let mut best_suppressed: Option<f64> = None;

    for (index, obj) in truth.iter().enumerate() {
        if !region.contains_point(obj.bbox.cx(), obj.bbox.cy()) {
            continue;
        }
        let mut r = rng::stream(&key(index as u64, TAG_OBJECT));
        let emit_draw: f64 = r.random();
        let visible = region.intersection_area(&obj.bbox) >= MIN_VISIBLE_FRACTION * obj.bbox.area();
        let emitted = visible && emit_draw < p_emit;
        if !emitted {
            let score = r.random_range(0.1..0.45);
            best_suppressed = Some(best_suppressed.map_or(score, |s: f64| s.max(score)));
            continue;
        }

        let b = &obj.bbox;
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut n = || std_normal.sample(&mut r);
        let cx = b.cx() + n() * profile.center_jitter * b.w();
        let cy = b.cy() + n() * profile.center_jitter * b.h();
        let w = (b.w() + n() * profile.size_jitter * b.w()).max(1.0);
        let h = (b.h() + n() * profile.size_jitter * b.h()).max(1.0);
        let mislabel_draw: f64 = r.random();
        let class_pick: u64 = r.random();
        let prob = r.random_range(0.5..1.0);

        let mut class_id = obj.class_id;
        let others: Vec<u32> = classes.iter().copied().filter(|&c| c != obj.class_id).collect();
        if mislabel_draw < profile.p_mislabel && !others.is_empty() {
            class_id = others[(class_pick % others.len() as u64) as usize];
        }
        let Some(clipped) = BBox::new(cx, cy, w, h).ok().and_then(|jb| clip_to(&jb, region)) else {
            continue;
        };
        detections.push(Detection::new(clipped, class_id, prob).expect("prob in [0.5, 1)"));
    }

    let rate = profile.p_false_positive * region.area()
        / (f64::from(image.width()) * f64::from(image.height()));
    if rate > 0.0 && !classes.is_empty() {
        let count = Poisson::new(rate)
            .map(|p| p.sample(&mut rng::stream(&key(0, TAG_FP_COUNT))) as u64)
            .unwrap_or(0);
        let (x1, y1, x2, y2) = region.corners();
        for j in 0..count {
            let mut r = rng::stream(&key(j, TAG_FP));
            let cx = r.random_range(x1..=x2);
            let cy = r.random_range(y1..=y2);
            let w = r.random_range(FP_SIZE_FRAC.0..FP_SIZE_FRAC.1) * region.w();
            let h = r.random_range(FP_SIZE_FRAC.0..FP_SIZE_FRAC.1) * region.h();
            let class_id = classes[r.random_range(0..classes.len())];
            let prob = r.random_range(0.5..0.9);
            if let Some(clipped) = BBox::new(cx, cy, w, h).ok().and_then(|b| clip_to(&b, region)) {
                detections.push(Detection::new(clipped, class_id, prob).expect("prob in [0.5, 0.9)"));
            }
        }
    }

    DetectorOutput {
        detections,
        sub_threshold_score: best_suppressed,
    }
}

fn clip_to(b: &BBox, region: &BBox) -> Option<BBox> {
    if region.contains_box(b, 0.0) {
        Some(*b)
    } else {
        b.intersection(region)
    }
}

/// [`sim_detect`] bound to one image's ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedDetector {
    image: ImageRef,
    truth: Vec<GroundTruthObject>,
    classes: Vec<u32>,
    profile: NoiseProfile,
}

impl SimulatedDetector {
    pub fn new(
        image: ImageRef,
        truth: Vec<GroundTruthObject>,
        mut classes: Vec<u32>,
        profile: NoiseProfile,
    ) -> Result<Self, ProfileError> {
        profile.validate()?;
        classes.sort_unstable();
        classes.dedup();
        Ok(Self {
            image,
            truth,
            classes,
            profile,
        })
    }

    pub fn for_ground_truth(
        gt: &crate::dataset::GroundTruthImage,
        profile: NoiseProfile,
    ) -> Result<Self, ProfileError> {
        Self::new(
            gt.image.clone(),
            gt.objects.clone(),
            gt.label_table.keys().copied().collect(),
            profile,
        )
    }

    pub fn profile(&self) -> &NoiseProfile {
        &self.profile
    }
}

impl Detector for SimulatedDetector {
    fn reports_sub_threshold(&self) -> bool {
        true
    }

    fn detect(&self, image: &ImageRef, crop: &Crop) -> Result<DetectorOutput, DetectorError> {
        if image.id() != self.image.id() {
            return Err(DetectorError::Failed(format!(
                "simulated detector holds image `{}`, asked for `{}`",
                self.image.id(),
                image.id()
            )));
        }
        let out = sim_detect(
            &self.image,
            &crop.region,
            crop.depth,
            &self.truth,
            &self.classes,
            &self.profile,
        );
        Ok(DetectorOutput {
            detections: out
                .detections
                .into_iter()
                .map(|d| d.with_box(crop.to_local(d.bbox())))
                .collect(),
            sub_threshold_score: out.sub_threshold_score,
        })
    }
}
