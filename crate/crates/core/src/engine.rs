//! One refinement pass per image: detect, match clicks, correct, recover
//! misses hierarchically, assemble one annotation per click.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::detector::{detect_region, Crop, Detector, DetectorError, DetectorOutput};
use crate::hierarchy::{hierarchical_detect, HierarchyTrace};
use crate::matcher::{apply_corrections, match_clicks};
use crate::model::{ClickAnnotation, Detection, EngineConfig, ImageRef, Provenance, RefinedAnnotation};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementStats {
    pub confirmed: usize,
    pub relabeled: usize,
    pub recovered: usize,
    pub unresolved: usize,
    pub detector_calls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_image_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementOutcome {
    /// One entry per click, ordered by click ordinal.
    pub annotations: Vec<RefinedAnnotation>,
    pub traces: Vec<HierarchyTrace>,
    pub stats: RefinementStats,
    /// What the detector reported on the full image, before any correction.
    pub raw_detections: Vec<Detection>,
}

struct Counting<'a, D: ?Sized> {
    inner: &'a D,
    calls: AtomicUsize,
}

impl<D: Detector + ?Sized> Detector for Counting<'_, D> {
    fn reports_sub_threshold(&self) -> bool {
        self.inner.reports_sub_threshold()
    }

    fn detect(&self, image: &ImageRef, crop: &Crop) -> Result<DetectorOutput, DetectorError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.detect(image, crop)
    }
}

/// Refines one image's clicks against `detector`.
///
/// A failure on the full image is recorded in the stats and treated as an
/// empty detection list, which sends every click to the hierarchical search.
pub fn refine_image<D: Detector + ?Sized>(
    img: &ImageRef,
    clicks: &[ClickAnnotation],
    detector: &D,
    cfg: &EngineConfig,
) -> RefinementOutcome {
    let counting = Counting {
        inner: detector,
        calls: AtomicUsize::new(0),
    };
    let mut stats = RefinementStats::default();
    let full = match detect_region(&counting, img, &Crop::full(img)) {
        Ok(out) => out,
        Err(e) => {
            stats.full_image_error = Some(e.to_string());
            DetectorOutput::default()
        }
    };

    let matched = match_clicks(clicks, &full.detections, cfg);
    let mut annotations = apply_corrections(clicks, &full.detections, &matched, img);
    let mut traces = Vec::new();
    for ann in annotations.iter_mut().filter(|a| a.provenance == Provenance::Unresolved) {
        let click = clicks
            .iter()
            .find(|c| c.sequence == ann.source_click)
            .expect("annotation comes from a click");
        let (result, trace) = hierarchical_detect(click, &counting, cfg, img, full.sub_threshold_score);
        *ann = result;
        traces.push(trace);
    }

    for ann in &annotations {
        match ann.provenance {
            Provenance::Confirmed => stats.confirmed += 1,
            Provenance::Relabeled => stats.relabeled += 1,
            Provenance::Recovered => stats.recovered += 1,
            Provenance::Unresolved => stats.unresolved += 1,
        }
    }
    stats.detector_calls = counting.calls.load(Ordering::Relaxed);

    RefinementOutcome {
        annotations,
        traces,
        stats,
        raw_detections: full.detections,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_corpus, SyntheticSpec};
    use crate::detector::{NoiseProfile, SimulatedDetector};
    use crate::model::BBox;

    fn exact_clicks(gt: &crate::dataset::GroundTruthImage) -> Vec<ClickAnnotation> {
        gt.objects
            .iter()
            .enumerate()
            .map(|(i, o)| ClickAnnotation::new(o.bbox.cx(), o.bbox.cy(), o.class_id, i as u64))
            .collect()
    }

    #[test]
    fn perfect_chain_confirms_every_click() {
        for gt in synthetic_corpus(&SyntheticSpec { images: 5, ..SyntheticSpec::default() }, 3) {
            let det = SimulatedDetector::for_ground_truth(&gt, NoiseProfile::noiseless()).unwrap();
            let out = refine_image(&gt.image, &exact_clicks(&gt), &det, &EngineConfig::default());
            assert_eq!(out.annotations.len(), gt.objects.len());
            for (ann, obj) in out.annotations.iter().zip(&gt.objects) {
                assert_eq!(ann.provenance, Provenance::Confirmed);
                assert_eq!(ann.bbox, Some(obj.bbox));
            }
            assert_eq!(out.stats.detector_calls, 1);
            assert!(out.traces.is_empty());
        }
    }

    struct OnlyFalsePositives;
    impl Detector for OnlyFalsePositives {
        fn detect(&self, image: &ImageRef, crop: &Crop) -> Result<DetectorOutput, DetectorError> {
            if crop.depth > 0 {
                return Ok(DetectorOutput::default());
            }
            let fp = Detection::new(BBox::new(5.0, 5.0, 4.0, 4.0).unwrap(), 0, 0.99).unwrap();
            let _ = image;
            Ok(DetectorOutput {
                detections: vec![fp],
                sub_threshold_score: None,
            })
        }
    }

    #[test]
    fn false_positives_only_leaves_everything_unresolved() {
        let img = ImageRef::new("fp", 100, 100, "").unwrap();
        let clicks = [ClickAnnotation::new(60.0, 60.0, 0, 0), ClickAnnotation::new(80.0, 30.0, 1, 1)];
        let cfg = EngineConfig {
            max_depth: 1,
            ..EngineConfig::default()
        };
        let out = refine_image(&img, &clicks, &OnlyFalsePositives, &cfg);
        assert!(out.annotations.iter().all(|a| a.provenance == Provenance::Unresolved));
        assert_eq!(out.stats.unresolved, 2);
        assert_eq!(crate::dataset::export_annotations(&out.annotations, &img), r#"{"boxes":[],"image_id":"fp"}"#);
    }

    struct FullImageFails;
    impl Detector for FullImageFails {
        fn detect(&self, _: &ImageRef, crop: &Crop) -> Result<DetectorOutput, DetectorError> {
            if crop.depth == 0 {
                return Err(DetectorError::Failed("gpu fell over".into()));
            }
            Ok(DetectorOutput::default())
        }
    }

    #[test]
    fn full_image_failure_degrades_to_hierarchy() {
        let img = ImageRef::new("f", 100, 100, "").unwrap();
        let clicks = [ClickAnnotation::new(50.0, 50.0, 0, 0)];
        let out = refine_image(&img, &clicks, &FullImageFails, &EngineConfig::default());
        assert!(out.stats.full_image_error.as_deref().unwrap().contains("gpu"));
        assert_eq!(out.traces.len(), 1);
        assert!(out.stats.detector_calls > 1);
    }

    #[test]
    fn annotations_follow_click_ordinal() {
        let gt = &synthetic_corpus(&SyntheticSpec { images: 1, ..SyntheticSpec::default() }, 9)[0];
        let mut clicks = exact_clicks(gt);
        clicks.reverse();
        let det = SimulatedDetector::for_ground_truth(gt, NoiseProfile { p_miss: 0.5, seed: 2, ..NoiseProfile::default() }).unwrap();
        let out = refine_image(&gt.image, &clicks, &det, &EngineConfig::default());
        let order: Vec<u64> = out.annotations.iter().map(|a| a.source_click).collect();
        assert_eq!(order, (0..gt.objects.len() as u64).collect::<Vec<_>>());
    }
}
